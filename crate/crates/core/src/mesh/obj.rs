//! ASCII Wavefront OBJ geometry: `v` and `f` records only.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::Point3;

use super::{MeshError, MeshModel};

pub fn load_obj(path: impl AsRef<Path>) -> Result<MeshModel, MeshError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| MeshError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_obj(BufReader::new(file), &name).map_err(|e| match e {
        MeshError::Io { source, .. } => MeshError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Parses OBJ text. Polygons are fan-triangulated; normals, texture coordinates,
/// groups and materials are ignored. Indices are 1-based; negative (relative)
/// indices are rejected.
pub fn parse_obj(reader: impl BufRead, name: &str) -> Result<MeshModel, MeshError> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut object_name: Option<String> = None;

    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|source| MeshError::Io {
            path: name.into(),
            source,
        })?;
        let content = line.split('#').next().unwrap_or("");
        let mut tokens = content.split_whitespace();
        let Some(keyword) = tokens.next() else {
            continue;
        };
        let malformed = |message: String| MeshError::Malformed { line: line_no, message };
        match keyword {
            "v" => {
                let coords: Vec<f64> = tokens
                    .by_ref()
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| malformed(format!("bad vertex coordinate: {e}")))?;
                if coords.len() != 3 || coords.iter().any(|c| !c.is_finite()) {
                    return Err(malformed("vertex needs three finite coordinates".into()));
                }
                vertices.push(Point3::new(coords[0], coords[1], coords[2]));
            }
            "f" => {
                let mut polygon = Vec::new();
                for token in tokens {
                    let index_text = token.split('/').next().unwrap_or("");
                    let index: i64 = index_text
                        .parse()
                        .map_err(|_| malformed(format!("bad face index `{token}`")))?;
                    if index <= 0 {
                        return Err(malformed(format!(
                            "face index {index} unsupported (indices are 1-based and absolute)"
                        )));
                    }
                    if index as usize > vertices.len() {
                        return Err(malformed(format!(
                            "face index {index} exceeds {} vertices defined so far",
                            vertices.len()
                        )));
                    }
                    polygon.push((index - 1) as u32);
                }
                if polygon.len() < 3 {
                    return Err(malformed("face needs at least three vertices".into()));
                }
                for k in 1..polygon.len() - 1 {
                    triangles.push([polygon[0], polygon[k], polygon[k + 1]]);
                }
            }
            "o" if object_name.is_none() => {
                let rest: Vec<&str> = tokens.collect();
                if !rest.is_empty() {
                    object_name = Some(rest.join(" "));
                }
            }
            _ => {}
        }
    }
    if triangles.is_empty() {
        return Err(MeshError::Empty(name.to_string()));
    }
    MeshModel::new(object_name.unwrap_or_else(|| name.to_string()), vertices, triangles)
}

/// Writes `o`, `v` and `f` records. Coordinates use the shortest representation
/// that parses back to the same `f64`.
pub fn write_obj(mesh: &MeshModel, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "o {}", mesh.name())?;
    for v in mesh.vertices() {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for t in mesh.triangles() {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    const CUBE: &str = "\
# unit cube with quads
o cube
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
vn 0 0 1
f 1 4 3 2
f 5//1 6//1 7//1 8//1
f 1/1 2/1 6/1 5/1
f 3 4 8 7
f 2 3 7 6
f 1 5 8 4
";

    #[test]
    fn minimal_triangle() {
        let mesh = parse_obj(Cursor::new("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n"), "tri").unwrap();
        assert_eq!(mesh.vertices().len(), 3);
        assert_eq!(mesh.triangle_count(), 1);
        assert_eq!(mesh.name(), "tri");
    }

    #[test]
    fn quad_cube_fans_to_twelve_closed_triangles() {
        let mesh = parse_obj(Cursor::new(CUBE), "x").unwrap();
        assert_eq!(mesh.name(), "cube");
        assert_eq!(mesh.triangle_count(), 12);
        assert!(mesh.is_closed());
    }

    #[test]
    fn malformed_records_report_line() {
        let err = parse_obj(Cursor::new("v 0 0 0\nv 1 0\n"), "bad").unwrap_err();
        assert!(matches!(err, MeshError::Malformed { line: 2, .. }), "{err}");
        let err = parse_obj(Cursor::new("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 -1\n"), "neg").unwrap_err();
        assert!(matches!(err, MeshError::Malformed { line: 4, .. }), "{err}");
        let err = parse_obj(Cursor::new("v 0 0 0\nf 1 2 3\n"), "oob").unwrap_err();
        assert!(matches!(err, MeshError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn empty_and_missing() {
        assert!(matches!(
            parse_obj(Cursor::new("# nothing\nv 0 0 0\n"), "e"),
            Err(MeshError::Empty(_))
        ));
        let err = load_obj("/definitely/not/here.obj").unwrap_err();
        assert!(err.is_missing_file());
    }
}
