//! Plain-text weight checkpoints.
//!
//! ```text
//! kmcl-checkpoint 1
//! classes 8
//! feature_dim 32
//! mode isotropic
//! shared none
//! input_dim 32
//! hidden 64,64
//! identity false
//! output_relu false
//! [enc.0.weight] 64 32
//! <64 lines of 32 values>
//! ...
//! [kmm.w_pi] 8 32
//! ...
//! ```
//!
//! Sections follow the model's tensor order (encoder layers, then `W_π`,
//! `W_μ`, `W_σ²`, `b_π`, `b_μ`, `b_σ²` and the shared variance). Each section
//! is row-major with the last axis on one line. Values use Rust's shortest
//! round-trip formatting, so a write-read cycle is exact.

use std::fs;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{KmclError, Result};
use crate::kmm::{KernelMode, SharedVariance};
use crate::model::{Model, ModelConfig};

pub const MAGIC: &str = "kmcl-checkpoint";
pub const VERSION: u32 = 1;

fn join<T: ToString>(xs: &[T], sep: &str) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(sep)
}

pub fn to_string(model: &Model) -> String {
    let cfg = model.config();
    let mut out = String::new();
    out.push_str(&format!("{MAGIC} {VERSION}\n"));
    out.push_str(&format!("classes {}\n", cfg.classes));
    out.push_str(&format!("feature_dim {}\n", cfg.encoder.feature_dim));
    out.push_str(&format!("mode {}\n", cfg.mode.name()));
    out.push_str(&format!("shared {}\n", cfg.shared.name()));
    out.push_str(&format!("input_dim {}\n", cfg.encoder.input_dim));
    out.push_str(&format!("hidden {}\n", join(&cfg.encoder.hidden, ",")));
    out.push_str(&format!("identity {}\n", cfg.encoder.identity));
    out.push_str(&format!("output_relu {}\n", cfg.encoder.output_relu));
    for (name, shape, values) in model.tensors() {
        out.push_str(&format!("[{name}] {}\n", join(&shape, " ")));
        let row = shape.last().copied().unwrap_or(1).max(1);
        for chunk in values.chunks(row) {
            let cells: Vec<String> = chunk.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_string(model)).map_err(|e| KmclError::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| KmclError::io(path, e))?;
    parse(&text, &path.display().to_string())
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    source: &'a str,
}

impl<'a> Lines<'a> {
    fn err(&self, line: usize, reason: impl Into<String>) -> KmclError {
        KmclError::Parse {
            path: self.source.to_string(),
            line,
            reason: reason.into(),
        }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        self.inner.next().map(|(i, l)| (i + 1, l.trim()))
    }

    fn key(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (n, line) = self.next().ok_or_else(|| self.err(0, format!("missing `{key}`")))?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok((n, v.trim())),
            _ => Err(self.err(n, format!("expected `{key} <value>`"))),
        }
    }

    fn number(&mut self, key: &str) -> Result<usize> {
        let (n, v) = self.key(key)?;
        v.parse().map_err(|_| self.err(n, format!("`{key}` must be a non-negative integer")))
    }

    fn flag(&mut self, key: &str) -> Result<bool> {
        let (n, v) = self.key(key)?;
        v.parse().map_err(|_| self.err(n, format!("`{key}` must be true or false")))
    }
}

/// Parse checkpoint text; `source` names the origin in error messages.
pub fn parse(text: &str, source: &str) -> Result<Model> {
    let mut lines = Lines {
        inner: text.lines().enumerate().peekable(),
        source,
    };
    let (n, magic) = lines.next().ok_or_else(|| lines.err(1, "empty checkpoint"))?;
    let version = match magic.split_once(' ') {
        Some((MAGIC, v)) => v
            .trim()
            .parse::<u32>()
            .map_err(|_| lines.err(n, "unreadable version"))?,
        _ => return Err(lines.err(n, format!("not a checkpoint (expected `{MAGIC} <version>`)"))),
    };
    if version != VERSION {
        return Err(lines.err(
            n,
            format!("unsupported checkpoint version {version} (expected {VERSION})"),
        ));
    }
    let classes = lines.number("classes")?;
    let feature_dim = lines.number("feature_dim")?;
    let (n, mode) = lines.key("mode")?;
    let mode = KernelMode::parse(mode).map_err(|e| lines.err(n, e.to_string()))?;
    let (n, shared) = lines.key("shared")?;
    let shared = SharedVariance::parse(shared).map_err(|e| lines.err(n, e.to_string()))?;
    let input_dim = lines.number("input_dim")?;
    let hidden = match lines.next() {
        Some((_, "hidden")) => Vec::new(),
        Some((n, line)) => match line.split_once(' ') {
            Some(("hidden", v)) => v
                .split(',')
                .map(|w| w.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| lines.err(n, "`hidden` must be comma-separated widths"))?,
            _ => return Err(lines.err(n, "expected `hidden <widths>`")),
        },
        None => return Err(lines.err(0, "missing `hidden`")),
    };
    let identity = lines.flag("identity")?;
    let output_relu = lines.flag("output_relu")?;
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            input_dim,
            hidden,
            feature_dim,
            identity,
            output_relu,
        },
        classes,
        mode,
        shared,
    };
    cfg.validate()?;
    let mut model = Model::init(&cfg, 0)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .tensors()
        .into_iter()
        .map(|(name, shape, _)| (name, shape))
        .collect();
    let mut values = Vec::with_capacity(model.num_params());
    for (name, shape) in &expected {
        let (n, header) = lines
            .next()
            .ok_or_else(|| lines.err(0, format!("missing section [{name}]")))?;
        let want = format!("[{name}] {}", join(shape, " "));
        if header != want {
            return Err(lines.err(n, format!("expected section header `{want}`, found `{header}`")));
        }
        let total: usize = shape.iter().product();
        let row = shape.last().copied().unwrap_or(1).max(1);
        for _ in 0..total / row {
            let (n, line) = lines
                .next()
                .ok_or_else(|| lines.err(0, format!("section [{name}] is truncated")))?;
            let cells: Vec<&str> = line.split_whitespace().collect();
            if cells.len() != row {
                return Err(lines.err(n, format!("expected {row} values, found {}", cells.len())));
            }
            for c in cells {
                let v: f64 = c
                    .parse()
                    .map_err(|_| lines.err(n, format!("`{c}` is not a number")))?;
                if !v.is_finite() {
                    return Err(lines.err(n, format!("non-finite value in [{name}]")));
                }
                values.push(v);
            }
        }
    }
    if let Some((n, extra)) = lines.inner.find(|(_, l)| !l.trim().is_empty()) {
        return Err(lines.err(n + 1, format!("unexpected trailing content `{}`", extra.trim())));
    }
    model.load_flat(&values)?;
    Ok(model)
}

/// Reject a checkpoint whose class count or input width differs from the data.
pub fn check_compatible(model: &Model, classes: usize, input_dim: usize) -> Result<()> {
    if model.classes() != classes {
        return Err(KmclError::DimensionMismatch {
            what: "classes (checkpoint K vs dataset K)",
            expected: model.classes(),
            found: classes,
        });
    }
    if model.input_dim() != input_dim {
        return Err(KmclError::DimensionMismatch {
            what: "input width (checkpoint vs dataset)",
            expected: model.input_dim(),
            found: input_dim,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(mode: KernelMode, shared: SharedVariance, hidden: Vec<usize>) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                input_dim: 5,
                hidden,
                feature_dim: 3,
                identity: false,
                output_relu: false,
            },
            classes: 4,
            mode,
            shared,
        }
    }

    fn perturbed(c: &ModelConfig) -> Model {
        let mut m = Model::init(c, 9).unwrap();
        for (i, (_, t)) in m.tensors_mut().into_iter().enumerate() {
            for (j, v) in t.iter_mut().enumerate() {
                *v += 1e-3 * (i * 31 + j) as f64 / 7.0 - 0.1 / 3.0;
            }
        }
        m
    }

    #[test]
    fn round_trip_is_exact() {
        for c in [
            cfg(KernelMode::Isotropic, SharedVariance::None, vec![6, 2]),
            cfg(KernelMode::Anisotropic, SharedVariance::Diagonal, vec![]),
            cfg(KernelMode::Isotropic, SharedVariance::Scalar, vec![7]),
        ] {
            let m = perturbed(&c);
            let text = to_string(&m);
            let back = parse(&text, "mem").unwrap();
            assert_eq!(back, m);
            assert_eq!(to_string(&back), text);
        }
    }

    #[test]
    fn identity_encoder_round_trips() {
        let mut c = cfg(KernelMode::Isotropic, SharedVariance::None, vec![]);
        c.encoder.identity = true;
        c.encoder.input_dim = 3;
        let m = perturbed(&c);
        assert_eq!(parse(&to_string(&m), "mem").unwrap(), m);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ckpt");
        let m = perturbed(&cfg(KernelMode::Isotropic, SharedVariance::None, vec![4]));
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
    }

    #[test]
    fn head_sections_in_fixed_order() {
        let text = to_string(&Model::init(&cfg(KernelMode::Isotropic, SharedVariance::None, vec![]), 1).unwrap());
        let sections: Vec<&str> = text.lines().filter(|l| l.starts_with('[')).collect();
        let head: Vec<&str> = sections
            .iter()
            .filter(|s| s.starts_with("[kmm"))
            .map(|s| s.split(']').next().unwrap())
            .collect();
        assert_eq!(
            head,
            ["[kmm.w_pi", "[kmm.w_mu", "[kmm.w_var", "[kmm.b_pi", "[kmm.b_mu", "[kmm.b_var", "[kmm.shared_var"]
        );
        assert!(sections[0].starts_with("[enc.0.weight] 3 5"));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let m = Model::init(&cfg(KernelMode::Isotropic, SharedVariance::None, vec![]), 1).unwrap();
        let text = to_string(&m).replacen("kmcl-checkpoint 1", "kmcl-checkpoint 7", 1);
        let err = parse(&text, "mem").unwrap_err().to_string();
        assert!(err.contains("version 7"), "{err}");
    }

    #[test]
    fn shape_mismatch_names_section() {
        let m = Model::init(&cfg(KernelMode::Isotropic, SharedVariance::None, vec![]), 1).unwrap();
        let text = to_string(&m).replace("[kmm.w_pi] 4 3", "[kmm.w_pi] 4 2");
        let err = parse(&text, "mem").unwrap_err().to_string();
        assert!(err.contains("kmm.w_pi"), "{err}");
    }

    #[test]
    fn truncated_and_garbled_inputs_fail() {
        let m = Model::init(&cfg(KernelMode::Isotropic, SharedVariance::None, vec![]), 1).unwrap();
        let text = to_string(&m);
        let cut: String = text.lines().take(12).map(|l| format!("{l}\n")).collect();
        assert!(parse(&cut, "mem").is_err());
        assert!(parse("", "mem").is_err());
        assert!(parse("hello 1\n", "mem").is_err());
        let bad = text.replacen("0.0", "zero", 1);
        assert!(parse(&bad, "mem").is_err());
        assert!(parse(&format!("{text}junk\n"), "mem").is_err());
    }

    #[test]
    fn compatibility_names_both_class_counts() {
        let m = Model::init(&cfg(KernelMode::Isotropic, SharedVariance::None, vec![]), 1).unwrap();
        assert!(check_compatible(&m, 4, 5).is_ok());
        let err = check_compatible(&m, 6, 5).unwrap_err().to_string();
        assert!(err.contains("expected 4") && err.contains("found 6"), "{err}");
    }
}
