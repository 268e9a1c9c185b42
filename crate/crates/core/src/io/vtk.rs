//! Legacy ASCII VTK export of single cubes, for inspection in external
//! viewers. Only interior cells are written, as cell data.

use std::io::{self, Write};

use crate::field::Field;
use crate::mesh::Cube;

/// Write local cube `li` of each field as one structured-points dataset.
/// Fields with one component become scalars, three components become vectors.
pub fn write_cube(
    out: &mut impl Write,
    cube: &Cube,
    li: usize,
    fields: &[&Field],
) -> io::Result<()> {
    let n = fields.first().map_or(0, |f| f.layout.cells);
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "cube {} level {}", cube.global_id, cube.level)?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET STRUCTURED_POINTS")?;
    writeln!(out, "DIMENSIONS {} {} {}", n + 1, n + 1, n + 1)?;
    let [x, y, z] = cube.base_corner;
    writeln!(out, "ORIGIN {x:e} {y:e} {z:e}")?;
    let h = cube.cell_spacing;
    writeln!(out, "SPACING {h:e} {h:e} {h:e}")?;
    writeln!(out, "CELL_DATA {}", n * n * n)?;
    for f in fields {
        let lay = f.layout;
        let a = &f.cubes[li];
        let v = lay.volume();
        match f.ncomp {
            1 => {
                writeln!(out, "SCALARS {} double 1", f.quantity.name())?;
                writeln!(out, "LOOKUP_TABLE default")?;
            }
            _ => writeln!(out, "VECTORS {} double", f.quantity.name())?,
        }
        // x fastest, matching the VTK point order
        for idx in lay.interior() {
            let line: Vec<String> = (0..f.ncomp.min(3))
                .map(|c| format!("{:e}", a[c * v + idx]))
                .collect();
            writeln!(out, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Layout, Quantity};
    use crate::mesh::{generate_mesh, Aabb, MeshSpec};

    #[test]
    fn header_and_counts() {
        let mesh =
            generate_mesh(&MeshSpec::uniform(Aabb::new([0.0; 3], [1.0; 3]), 1.0, 4)).unwrap();
        let lay = Layout::new(4, 2);
        let mut p = Field::new(Quantity::Pressure, 1, lay, 1);
        let u = Field::new(Quantity::Velocity, 3, lay, 1);
        for (n, idx) in lay.interior().enumerate() {
            p.cubes[0][idx] = n as f64;
        }
        let mut out = Vec::new();
        write_cube(&mut out, mesh.cube(0), 0, &[&p, &u]).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.contains("DIMENSIONS 5 5 5"));
        assert!(text.contains("CELL_DATA 64"));
        let lines: Vec<&str> = text.lines().collect();
        let s = lines
            .iter()
            .position(|l| l.starts_with("LOOKUP_TABLE"))
            .unwrap();
        assert_eq!(lines[s + 1].parse::<f64>().unwrap(), 0.0);
        assert_eq!(lines[s + 64].parse::<f64>().unwrap(), 63.0);
        let vpos = lines.iter().position(|l| l.starts_with("VECTORS")).unwrap();
        assert_eq!(lines.len() - vpos - 1, 64);
    }
}
