//! Procedural test meshes.

use super::mesh::TriangleMesh;
use nalgebra::Vector3;

/// Unit cube centered at the origin, 12 triangles, default gray.
pub fn unit_cube() -> TriangleMesh {
    cuboid(1.0, 1.0, 1.0)
}

/// Axis-aligned box centered at the origin with the given side lengths.
pub fn cuboid(sx: f64, sy: f64, sz: f64) -> TriangleMesh {
    let (hx, hy, hz) = (sx / 2.0, sy / 2.0, sz / 2.0);
    let mut vertices = Vec::with_capacity(8);
    for k in 0..8 {
        let x = if k & 4 == 0 { -hx } else { hx };
        let y = if k & 2 == 0 { -hy } else { hy };
        let z = if k & 1 == 0 { -hz } else { hz };
        vertices.push(Vector3::new(x, y, z));
    }
    // Two triangles per face; windings consistent outward.
    let faces = vec![
        [0, 1, 3],
        [0, 3, 2], // -x
        [4, 6, 7],
        [4, 7, 5], // +x
        [0, 4, 5],
        [0, 5, 1], // -y
        [2, 3, 7],
        [2, 7, 6], // +y
        [0, 2, 6],
        [0, 6, 4], // -z
        [1, 5, 7],
        [1, 7, 3], // +z
    ];
    TriangleMesh::new(vertices, faces, None).expect("cuboid is valid")
}

/// Regular tetrahedron with circumradius roughly `scale`.
pub fn tetrahedron(scale: f64) -> TriangleMesh {
    let s = scale;
    let vertices = vec![
        Vector3::new(s, s, s),
        Vector3::new(s, -s, -s),
        Vector3::new(-s, s, -s),
        Vector3::new(-s, -s, s),
    ];
    let faces = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    TriangleMesh::new(vertices, faces, None).expect("tetrahedron is valid")
}

/// A single triangle, handy for silhouette edge-case tests.
pub fn single_triangle(a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>) -> TriangleMesh {
    TriangleMesh::new(vec![a, b, c], vec![[0, 1, 2]], None).expect("triangle is valid")
}

/// Icosphere of the given radius with a procedural color texture
/// (latitude bands crossed with longitude checks) so different views are
/// photometrically distinctive. `subdivisions = 2` gives 320 faces.
pub fn textured_icosphere(subdivisions: usize, radius: f64) -> TriangleMesh {
    let phi = (1.0 + 5.0f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vector3<f64>> = vec![
        Vector3::new(-1.0, phi, 0.0),
        Vector3::new(1.0, phi, 0.0),
        Vector3::new(-1.0, -phi, 0.0),
        Vector3::new(1.0, -phi, 0.0),
        Vector3::new(0.0, -1.0, phi),
        Vector3::new(0.0, 1.0, phi),
        Vector3::new(0.0, -1.0, -phi),
        Vector3::new(0.0, 1.0, -phi),
        Vector3::new(phi, 0.0, -1.0),
        Vector3::new(phi, 0.0, 1.0),
        Vector3::new(-phi, 0.0, -1.0),
        Vector3::new(-phi, 0.0, 1.0),
    ]
    .into_iter()
    .map(|v| v.normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoints = std::collections::HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, vs: &mut Vec<Vector3<f64>>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let m = ((vs[a] + vs[b]) / 2.0).normalize();
                vs.push(m);
                vs.len() - 1
            })
        };
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }

    let colors: Vec<[f64; 3]> = vertices
        .iter()
        .map(|v| {
            let lat = v.y.asin(); // [-pi/2, pi/2]
            let lon = v.z.atan2(v.x); // [-pi, pi]
            let band = ((lat * 5.0).sin() * 0.5 + 0.5).round();
            let check = ((lon * 4.0).sin() * 0.5 + 0.5).round();
            match (band as u32, check as u32) {
                (0, 0) => [0.85, 0.25, 0.2],
                (0, 1) => [0.95, 0.8, 0.2],
                (1, 0) => [0.2, 0.45, 0.85],
                _ => [0.25, 0.75, 0.4],
            }
        })
        .collect();

    let vertices: Vec<Vector3<f64>> = vertices.into_iter().map(|v| v * radius).collect();
    TriangleMesh::new(vertices, faces, Some(colors)).expect("icosphere is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_face_count() {
        let m = textured_icosphere(2, 0.065);
        assert_eq!(m.faces.len(), 320);
        assert!((m.diameter - 0.13).abs() < 1e-9);
    }

    #[test]
    fn icosphere_has_multiple_colors() {
        let m = textured_icosphere(1, 0.1);
        let mut distinct = std::collections::HashSet::new();
        for c in &m.vertex_colors {
            distinct.insert(format!("{:.2},{:.2},{:.2}", c[0], c[1], c[2]));
        }
        assert!(distinct.len() >= 3);
    }
}
