//! Bowyer-Watson Delaunay triangulation for the synthetic mesh generator.
//!
//! Quadratic in the worst case (every insertion scans the live triangles),
//! which is fine for the few-thousand-node meshes generated here. Inputs
//! should be jittered so no four points are exactly cocircular.

use std::collections::HashSet;

use super::signed_area;

/// CCW triangles over `points`.
pub(crate) fn triangulate(points: &[[f64; 2]]) -> Vec<[usize; 3]> {
    let n = points.len();
    if n < 3 {
        return Vec::new();
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let big = 100.0 * span;
    let mut pts = points.to_vec();
    pts.push([mid[0] - big, mid[1] - big]);
    pts.push([mid[0] + big, mid[1] - big]);
    pts.push([mid[0], mid[1] + big]);

    let mut tris: Vec<[usize; 3]> = vec![[n, n + 1, n + 2]];
    let mut alive: Vec<bool> = vec![true];

    for p in 0..n {
        let q = pts[p];
        let mut bad = Vec::new();
        for (t, tri) in tris.iter().enumerate() {
            if alive[t] && in_circumcircle(pts[tri[0]], pts[tri[1]], pts[tri[2]], q) {
                bad.push(t);
            }
        }
        let mut edges = HashSet::with_capacity(bad.len() * 3);
        for &t in &bad {
            let tri = tris[t];
            for k in 0..3 {
                edges.insert((tri[k], tri[(k + 1) % 3]));
            }
            alive[t] = false;
        }
        let mut boundary: Vec<(usize, usize)> = edges.iter().filter(|&&(a, b)| !edges.contains(&(b, a))).copied().collect();
        boundary.sort_unstable();
        for (a, b) in boundary {
            tris.push([a, b, p]);
            alive.push(true);
        }
    }

    tris.into_iter()
        .zip(alive)
        .filter(|(t, ok)| *ok && t.iter().all(|&v| v < n))
        .map(|(t, _)| t)
        .filter(|t| signed_area(points[t[0]], points[t[1]], points[t[2]]) > 0.0)
        .collect()
}

/// True when `d` is strictly inside the circumcircle of CCW `(a, b, c)`.
fn in_circumcircle(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let (adx, ady) = (a[0] - d[0], a[1] - d[1]);
    let (bdx, bdy) = (b[0] - d[0], b[1] - d[1]);
    let (cdx, cdy) = (c[0] - d[0], c[1] - d[1]);
    let ad = adx * adx + ady * ady;
    let bd = bdx * bdx + bdy * bdy;
    let cd = cdx * cdx + cdy * cdy;
    let det = adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) + ad * (bdx * cdy - bdy * cdx);
    det > 0.0
}
