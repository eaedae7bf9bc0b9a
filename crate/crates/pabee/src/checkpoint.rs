//! Plain-text checkpoint format.
//!
//! ```text
//! pabee-checkpoint 1
//! input_dim 2
//! hidden_dim 32
//! num_layers 12
//! task classification 2        (or: task regression)
//! nonlinearity tanh
//! seed 7
//! tensor embedding.weight 32 2
//! <one line per matrix row, values separated by single spaces>
//! tensor embedding.bias 32
//! <one line>
//! tensor layer1.weight 32 32
//! ...
//! tensor head12.bias 2
//! end
//! ```
//!
//! Tensors appear in flat-parameter order: embedding, layers `1..=n`, heads
//! `1..=n`, each weight (rows = outputs) followed by its bias. Values are
//! written in Rust's shortest round-trip notation, so a save/load cycle is
//! bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pabee_core::model::{Affine, ModelParams, Nonlinearity, StackConfig, Task};
use pabee_core::numerics::Matrix;

use crate::error::{Error, Result};

pub const MAGIC: &str = "pabee-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> String {
    let cfg = &params.config;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {FORMAT_VERSION}");
    let _ = writeln!(out, "input_dim {}", cfg.input_dim);
    let _ = writeln!(out, "hidden_dim {}", cfg.hidden_dim);
    let _ = writeln!(out, "num_layers {}", cfg.num_layers);
    match cfg.task {
        Task::Classification { num_classes } => {
            let _ = writeln!(out, "task classification {num_classes}");
        }
        Task::Regression => out.push_str("task regression\n"),
    }
    let _ = writeln!(out, "nonlinearity {}", cfg.nonlinearity.name());
    let _ = writeln!(out, "seed {}", cfg.seed);
    for (name, tensor) in tensor_names(cfg.num_layers).iter().zip(params.tensors()) {
        let w = &tensor.weight;
        let _ = writeln!(out, "tensor {name}.weight {} {}", w.rows(), w.cols());
        for row in w.iter_rows() {
            push_values(&mut out, row);
        }
        let _ = writeln!(out, "tensor {name}.bias {}", tensor.bias.len());
        push_values(&mut out, &tensor.bias);
    }
    out.push_str("end\n");
    out
}

fn push_values(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:?}");
    }
    out.push('\n');
}

fn tensor_names(num_layers: usize) -> Vec<String> {
    std::iter::once("embedding".to_string())
        .chain((1..=num_layers).map(|i| format!("layer{i}")))
        .chain((1..=num_layers).map(|i| format!("head{i}")))
        .collect()
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> std::result::Result<(usize, &'a str), String> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| "unexpected end of file".to_string())
    }

    fn field(&mut self, key: &str) -> std::result::Result<Vec<&'a str>, String> {
        let (line, text) = self.next()?;
        let mut parts = text.split(' ');
        match parts.next() {
            Some(k) if k == key => Ok(parts.collect()),
            _ => Err(format!("line {line}: expected `{key}`")),
        }
    }

    fn count(&mut self, key: &str) -> std::result::Result<usize, String> {
        let fields = self.field(key)?;
        match fields.as_slice() {
            [v] => v.parse().map_err(|_| format!("`{key}` is not a count")),
            _ => Err(format!("`{key}` takes one value")),
        }
    }

    fn values(&mut self, expected: usize) -> std::result::Result<Vec<f64>, String> {
        let (line, text) = self.next()?;
        let values = text
            .split(' ')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| format!("line {line}: {e}"))?;
        if values.len() != expected {
            return Err(format!(
                "line {line}: expected {expected} values, found {}",
                values.len()
            ));
        }
        Ok(values)
    }
}

pub fn decode(text: &str) -> std::result::Result<ModelParams, String> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let header = lines.field(MAGIC)?;
    if header != [FORMAT_VERSION.to_string().as_str()] {
        return Err(format!("unsupported format version {header:?}"));
    }
    let input_dim = lines.count("input_dim")?;
    let hidden_dim = lines.count("hidden_dim")?;
    let num_layers = lines.count("num_layers")?;
    let task = match lines.field("task")?.as_slice() {
        ["classification", k] => Task::Classification {
            num_classes: k.parse().map_err(|_| "bad class count".to_string())?,
        },
        ["regression"] => Task::Regression,
        other => return Err(format!("unknown task {other:?}")),
    };
    let nonlinearity = match lines.field("nonlinearity")?.as_slice() {
        ["tanh"] => Nonlinearity::Tanh,
        ["relu"] => Nonlinearity::Relu,
        other => return Err(format!("unknown nonlinearity {other:?}")),
    };
    let seed = match lines.field("seed")?.as_slice() {
        [v] => v.parse().map_err(|_| "bad seed".to_string())?,
        _ => return Err("`seed` takes one value".into()),
    };
    let config = StackConfig {
        input_dim,
        hidden_dim,
        num_layers,
        task,
        nonlinearity,
        seed,
    };
    let mut params = ModelParams::zeros(config).map_err(|e| e.to_string())?;
    let names = tensor_names(num_layers);
    let slots: Vec<&mut Affine> = std::iter::once(&mut params.embedding)
        .chain(params.layers.iter_mut())
        .chain(params.heads.iter_mut())
        .collect();
    for (name, slot) in names.iter().zip(slots) {
        let (rows, cols) = (slot.outputs(), slot.inputs());
        let dims = lines.field("tensor")?;
        if dims
            != [
                format!("{name}.weight").as_str(),
                &rows.to_string(),
                &cols.to_string(),
            ]
        {
            return Err(format!(
                "expected tensor {name}.weight {rows} {cols}, found {dims:?}"
            ));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(lines.values(cols)?);
        }
        slot.weight = Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())?;
        let dims = lines.field("tensor")?;
        if dims != [format!("{name}.bias").as_str(), &rows.to_string()] {
            return Err(format!(
                "expected tensor {name}.bias {rows}, found {dims:?}"
            ));
        }
        slot.bias = lines.values(rows)?;
        if slot.bias.iter().any(|v| !v.is_finite()) {
            return Err(format!("{name}.bias has a non-finite value"));
        }
    }
    lines.field("end")?;
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode(&text).map_err(|message| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(task: Task) -> StackConfig {
        StackConfig {
            input_dim: 3,
            hidden_dim: 4,
            num_layers: 3,
            task,
            nonlinearity: Nonlinearity::Relu,
            seed: 99,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for task in [Task::Classification { num_classes: 3 }, Task::Regression] {
            let mut params = ModelParams::init(config(task)).unwrap();
            // awkward values
            params.embedding.bias = vec![-0.0, 1e-310, 0.1 + 0.2, -1.7976931348623157e308];
            let decoded = decode(&encode(&params)).unwrap();
            assert_eq!(decoded.config, params.config);
            let a: Vec<u64> = params.to_flat().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = decoded.to_flat().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn header_layout() {
        let params = ModelParams::init(config(Task::Classification { num_classes: 2 })).unwrap();
        let text = encode(&params);
        let head: Vec<&str> = text.lines().take(8).collect();
        assert_eq!(
            head,
            [
                "pabee-checkpoint 1",
                "input_dim 3",
                "hidden_dim 4",
                "num_layers 3",
                "task classification 2",
                "nonlinearity relu",
                "seed 99",
                "tensor embedding.weight 4 3",
            ]
        );
        assert!(text.ends_with("tensor head3.bias 2\n0.0 0.0\nend\n"));
    }

    #[test]
    fn rejects_corruption() {
        let params = ModelParams::init(config(Task::Regression)).unwrap();
        let text = encode(&params);
        assert!(decode(&text.replace("pabee-checkpoint 1", "pabee-checkpoint 2")).is_err());
        assert!(decode(&text.replace("tensor layer2.weight", "tensor layer9.weight")).is_err());
        assert!(decode(text.trim_end_matches("end\n")).is_err());
        let truncated: String = text.lines().take(12).map(|l| format!("{l}\n")).collect();
        assert!(decode(&truncated).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = ModelParams::init(config(Task::Regression)).unwrap();
        save(&params, &path).unwrap();
        assert_eq!(load(&path).unwrap(), params);
        let err = load(&dir.path().join("missing.ckpt")).unwrap_err();
        assert_eq!(err.exit_code(), crate::error::exit_code::IO);
    }
}
