//! Assignment-map export: one binary PGM per part token (patch grid pixels;
//! zero outside the part's subset, attention weight rescaled to 0..255
//! inside it) plus a CSV sidecar holding the raw transport plan and mask.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::attention::LayerTrace;

use super::HarnessError;

/// Write a binary (P5) PGM with maxval 255.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), HarnessError> {
    if pixels.len() != width * height {
        return Err(HarnessError::Eval(format!(
            "{} pixels for a {width}x{height} map",
            pixels.len()
        )));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Attention weights over the patch grid, rescaled so the largest weight maps
/// to 255. Patches outside the subset already carry weight zero.
pub fn weights_to_pixels(weights: &[f64]) -> Vec<u8> {
    let max = weights.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return vec![0; weights.len()];
    }
    weights
        .iter()
        .map(|&w| ((w / max) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Export every part token's map for one (layer, head) of a trace, plus the
/// plan/mask CSV. Returns the paths written. `grid` is the patch grid shape
/// (rows, cols); part maps are `grid_w x grid_h` images, one pixel per patch.
pub fn export_maps(
    trace: &LayerTrace,
    layer: usize,
    head: usize,
    grid: (usize, usize),
    out_dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    let (grid_h, grid_w) = grid;
    let entries = trace.head_entries(head);
    if entries.is_empty() {
        return Err(HarnessError::Eval(format!(
            "trace has no entries for head {head}"
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let csv_path = out_dir.join(format!("plan_layer{layer:02}_head{head:02}.csv"));
    let mut csv = String::new();
    for entry in &entries {
        if entry.mask.num_patches() != grid_h * grid_w {
            return Err(HarnessError::Eval(format!(
                "mask covers {} patches but the grid is {grid_h}x{grid_w}",
                entry.mask.num_patches()
            )));
        }
        if let Some(plan) = &entry.plan {
            let values = plan.values.data();
            let n = plan.num_patches();
            for p in 0..plan.num_parts() {
                csv.push_str(&format!("plan,{},{p}", entry.set_index));
                for v in &values[p * n..(p + 1) * n] {
                    // Shortest-roundtrip formatting: parses back bit-exact.
                    csv.push_str(&format!(",{v}"));
                }
                csv.push('\n');
            }
        }
        csv.push_str(&format!("mask,{}", entry.set_index));
        for &p in &entry.mask.part_of {
            csv.push_str(&format!(",{p}"));
        }
        csv.push('\n');

        for (p, weights) in entry.part_attention.iter().enumerate() {
            let path = out_dir.join(format!(
                "map_layer{layer:02}_head{head:02}_set{}_part{p}.pgm",
                entry.set_index
            ));
            write_pgm(&path, grid_w, grid_h, &weights_to_pixels(weights))?;
            written.push(path);
        }
    }
    std::fs::write(&csv_path, csv)?;
    written.push(csv_path);
    Ok(written)
}

/// Parse a sidecar CSV back into per-set plan rows and masks.
#[allow(clippy::type_complexity)]
pub fn read_plan_csv(
    path: &Path,
) -> Result<(Vec<(usize, Vec<Vec<f64>>)>, Vec<(usize, Vec<usize>)>), HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut plans: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
    let mut masks = Vec::new();
    for line in text.lines() {
        let mut fields = line.split(',');
        let kind = fields.next().unwrap_or_default();
        let parse_err = |what: &str| HarnessError::Eval(format!("bad {what} in '{line}'"));
        match kind {
            "plan" => {
                let set: usize = fields
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse_err("set index"))?;
                let _part: usize = fields
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse_err("part index"))?;
                let row: Vec<f64> = fields
                    .map(|s| s.parse().map_err(|_| parse_err("plan value")))
                    .collect::<Result<_, _>>()?;
                match plans.last_mut() {
                    Some((last_set, rows)) if *last_set == set => rows.push(row),
                    _ => plans.push((set, vec![row])),
                }
            }
            "mask" => {
                let set: usize = fields
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| parse_err("set index"))?;
                let mask: Vec<usize> = fields
                    .map(|s| s.parse().map_err(|_| parse_err("mask value")))
                    .collect::<Result<_, _>>()?;
                masks.push((set, mask));
            }
            other => {
                return Err(HarnessError::Eval(format!("unknown record kind '{other}'")));
            }
        }
    }
    Ok((plans, masks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::HeadSetTrace;
    use crate::sinkhorn::{AssignmentMask, TransportPlan};
    use crate::tensor::Tensor;

    fn trace_with(weights: Vec<Vec<f64>>, mask: Vec<usize>, plan_values: Vec<f64>) -> LayerTrace {
        let parts = weights.len();
        let n = mask.len();
        LayerTrace {
            entries: vec![HeadSetTrace {
                head: 0,
                set_index: 0,
                sim: Tensor::zeros(&[parts, n]),
                plan: Some(TransportPlan {
                    values: Tensor::new(&[parts, n], plan_values).unwrap(),
                    row_target: 1.0 / parts as f64,
                    col_target: 1.0 / n as f64,
                    residual: 0.0,
                }),
                mask: AssignmentMask::new(mask, parts).unwrap(),
                part_attention: weights,
                repairs: Vec::new(),
            }],
        }
    }

    #[test]
    fn singleton_map_has_one_full_brightness_cell() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = vec![0.0; 12];
        w[5] = 1.0;
        let trace = trace_with(
            vec![w, vec![1.0 / 11.0; 12]],
            vec![1, 1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 1],
            (0..24).map(|i| i as f64 / 24.0).collect(),
        );
        let files = export_maps(&trace, 0, 0, (4, 3), dir.path()).unwrap();
        let pgm = files
            .iter()
            .find(|p| p.file_name().unwrap().to_str().unwrap().contains("part0"))
            .unwrap();
        let bytes = std::fs::read(pgm).unwrap();
        let header_end = bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4;
        let pixels = &bytes[header_end..];
        assert_eq!(pixels.len(), 12);
        assert_eq!(pixels[5], 255);
        assert_eq!(pixels.iter().filter(|&&p| p != 0).count(), 1);
    }

    #[test]
    fn uniform_weights_give_equal_nonzero_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = vec![0.0; 12];
        for i in [0, 3, 7, 9] {
            w[i] = 0.25;
        }
        let mut part_of = vec![1; 12];
        for i in [0, 3, 7, 9] {
            part_of[i] = 0;
        }
        let trace = trace_with(vec![w, vec![0.125; 12]], part_of, vec![1.0 / 24.0; 24]);
        let files = export_maps(&trace, 2, 0, (4, 3), dir.path()).unwrap();
        let pgm = files
            .iter()
            .find(|p| p.file_name().unwrap().to_str().unwrap().contains("part0"))
            .unwrap();
        let bytes = std::fs::read(pgm).unwrap();
        let header_end = bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4;
        let pixels = &bytes[header_end..];
        let nonzero: Vec<u8> = pixels.iter().copied().filter(|&p| p != 0).collect();
        assert_eq!(nonzero.len(), 4);
        assert!(nonzero.iter().all(|&p| p == nonzero[0]));
    }

    #[test]
    fn csv_roundtrips_plan_values_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let plan_values: Vec<f64> = (0..24)
            .map(|i| (i as f64 * 0.7318).sin() / 3.0 + 1e-13)
            .collect();
        let trace = trace_with(
            vec![vec![0.5; 12], vec![0.5; 12]],
            vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1],
            plan_values.clone(),
        );
        export_maps(&trace, 1, 0, (4, 3), dir.path()).unwrap();
        let (plans, masks) =
            read_plan_csv(&dir.path().join("plan_layer01_head00.csv")).unwrap();
        assert_eq!(plans.len(), 1);
        let flat: Vec<f64> = plans[0].1.iter().flatten().copied().collect();
        let bits_in: Vec<u64> = plan_values.iter().map(|v| v.to_bits()).collect();
        let bits_out: Vec<u64> = flat.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_in, bits_out);
        assert_eq!(masks[0].1, vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn missing_head_is_an_error() {
        let trace = LayerTrace { entries: Vec::new() };
        let dir = tempfile::tempdir().unwrap();
        assert!(export_maps(&trace, 0, 3, (4, 3), dir.path()).is_err());
    }
}
