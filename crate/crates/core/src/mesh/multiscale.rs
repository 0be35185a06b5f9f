use serde::{Deserialize, Serialize};

use super::{decimate, Mesh, MeshError};

/// Directed edges with `(dx, dy, |d|)` features, `d = x[dst] - x[src]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeSet {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub feat: Vec<[f64; 3]>,
}

impl EdgeSet {
    fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>, src_xy: &[[f64; 2]], dst_xy: &[[f64; 2]]) -> Self {
        let mut e = EdgeSet::default();
        for (s, d) in pairs {
            let dx = dst_xy[d][0] - src_xy[s][0];
            let dy = dst_xy[d][1] - src_xy[s][1];
            e.src.push(s);
            e.dst.push(d);
            e.feat.push([dx, dy, dx.hypot(dy)]);
        }
        e
    }

    fn both_directions(mesh: &Mesh) -> Self {
        let pairs = mesh.edges().into_iter().flat_map(|(a, b)| [(a, b), (b, a)]);
        Self::from_pairs(pairs, mesh.coords(), mesh.coords())
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    fn reversed(&self) -> Self {
        EdgeSet {
            src: self.dst.clone(),
            dst: self.src.clone(),
            feat: self.feat.iter().map(|f| [-f[0], -f[1], f[2]]).collect(),
        }
    }
}

/// Two-level hierarchy. Index spaces: `o2o` is fine to fine, `r2r` coarse to
/// coarse, `o2r` fine to coarse, `r2o` coarse to fine.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiscaleGraph {
    pub fine: Mesh,
    pub coarse: Mesh,
    pub retained: Vec<usize>,
    /// Coarse node owning each fine node; retained nodes own themselves.
    pub parent: Vec<usize>,
    pub o2o: EdgeSet,
    pub o2r: EdgeSet,
    pub r2r: EdgeSet,
    pub r2o: EdgeSet,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    coarse_triangles: Vec<[usize; 3]>,
    retained: Vec<usize>,
    parent: Vec<usize>,
    o2o: EdgeSet,
    o2r: EdgeSet,
    r2r: EdgeSet,
    r2o: EdgeSet,
}

pub fn build_multiscale(fine: Mesh, coarse: Mesh, retained: Vec<usize>) -> Result<MultiscaleGraph, MeshError> {
    let nf = fine.n_nodes();
    if retained.len() != coarse.n_nodes() {
        return Err(MeshError::Hierarchy(format!(
            "{} retained entries for {} coarse nodes",
            retained.len(),
            coarse.n_nodes()
        )));
    }
    let mut parent = vec![usize::MAX; nf];
    for (c, &f) in retained.iter().enumerate() {
        if f >= nf {
            return Err(MeshError::Hierarchy(format!("retained[{c}] = {f} out of range")));
        }
        if parent[f] != usize::MAX {
            return Err(MeshError::Hierarchy(format!("fine node {f} retained twice")));
        }
        if coarse.coords()[c] != fine.coords()[f] {
            return Err(MeshError::Hierarchy(format!("coarse node {c} is not at fine node {f}")));
        }
        parent[f] = c;
    }

    let fx = fine.coords();
    let mut o2r_pairs = Vec::with_capacity(nf - retained.len());
    for i in 0..nf {
        if parent[i] != usize::MAX {
            continue;
        }
        // Strict comparison keeps the lowest coarse index on ties; retained
        // is increasing in fine index whenever it comes from decimation.
        let mut best = (f64::INFINITY, 0);
        for (c, &f) in retained.iter().enumerate() {
            let d = (fx[f][0] - fx[i][0]).powi(2) + (fx[f][1] - fx[i][1]).powi(2);
            if d < best.0 || (d == best.0 && f < retained[best.1]) {
                best = (d, c);
            }
        }
        o2r_pairs.push((i, best.1));
    }
    for &(i, c) in &o2r_pairs {
        parent[i] = c;
    }
    let o2r = EdgeSet::from_pairs(o2r_pairs, fx, coarse.coords());
    let r2o = o2r.reversed();
    Ok(MultiscaleGraph {
        o2o: EdgeSet::both_directions(&fine),
        r2r: EdgeSet::both_directions(&coarse),
        fine,
        coarse,
        retained,
        parent,
        o2r,
        r2o,
    })
}

impl MultiscaleGraph {
    /// Decimates `fine` by `ratio` and builds the hierarchy.
    pub fn from_mesh(fine: Mesh, ratio: f64) -> Result<Self, MeshError> {
        let d = decimate(&fine, ratio)?;
        build_multiscale(fine, d.coarse, d.retained)
    }

    /// Same hierarchy with fine node `i` taken from old fine node `perm[i]`.
    /// Coarse ids are unchanged.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, MeshError> {
        let fine = self.fine.permuted(perm)?;
        let mut inv = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let retained = self.retained.iter().map(|&f| inv[f]).collect();
        build_multiscale(fine, self.coarse.clone(), retained)
    }

    pub fn n_fine(&self) -> usize {
        self.fine.n_nodes()
    }

    pub fn n_coarse(&self) -> usize {
        self.coarse.n_nodes()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&GraphFile {
            coarse_triangles: self.coarse.triangles().to_vec(),
            retained: self.retained.clone(),
            parent: self.parent.clone(),
            o2o: self.o2o.clone(),
            o2r: self.o2r.clone(),
            r2r: self.r2r.clone(),
            r2o: self.r2o.clone(),
        })
        .expect("graph serializes")
    }

    /// Rebuilds the hierarchy of `fine` from a companion file and checks the
    /// stored edges against the rebuilt ones.
    pub fn from_json(fine: Mesh, text: &str) -> Result<Self, MeshError> {
        let f: GraphFile = serde_json::from_str(text)?;
        let coarse = Mesh::new(
            f.retained.iter().map(|&i| fine.coords().get(i).copied().unwrap_or([f64::NAN; 2])).collect(),
            f.retained.iter().map(|&i| fine.node_types().get(i).copied().unwrap_or(super::NodeType::Fluid)).collect(),
            f.coarse_triangles,
        )?;
        let g = build_multiscale(fine, coarse, f.retained)?;
        if g.parent != f.parent || g.o2o != f.o2o || g.o2r != f.o2r || g.r2r != f.r2r || g.r2o != f.r2o {
            return Err(MeshError::Hierarchy("stored edge sets disagree with the mesh".into()));
        }
        Ok(g)
    }
}
