//! Plain-text checkpoint format.
//!
//! ```text
//! dcsat-net 1
//! seed <u64|none>
//! dims d_0 d_1 ... d_H
//! activations a_1 ... a_H
//! layer 1
//! <d_1 lines of d_0 weights>
//! <one line of d_1 biases>
//! layer 2
//! ...
//! ```
//!
//! Floats are written in shortest round-trip scientific notation, so a
//! save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use super::{Activation, DenseLayer, DenseNet};
use crate::error::{Error, Result};
use crate::fsio::{read_text, write_atomic};
use crate::linalg::DenseMatrix;

const MAGIC: &str = "dcsat-net 1";

fn push_row(out: &mut String, row: &[f64]) {
    for (j, v) in row.iter().enumerate() {
        if j > 0 {
            out.push(' ');
        }
        write!(out, "{v:e}").unwrap();
    }
    out.push('\n');
}

impl DenseNet {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        match self.init_seed {
            Some(s) => writeln!(out, "seed {s}").unwrap(),
            None => out.push_str("seed none\n"),
        }
        let dims: Vec<String> = self.dims().iter().map(|d| d.to_string()).collect();
        writeln!(out, "dims {}", dims.join(" ")).unwrap();
        let acts: Vec<String> = self.layers.iter().map(|l| l.activation.to_string()).collect();
        writeln!(out, "activations {}", acts.join(" ")).unwrap();
        for (l, layer) in self.layers.iter().enumerate() {
            writeln!(out, "layer {}", l + 1).unwrap();
            for i in 0..layer.out_dim() {
                push_row(&mut out, layer.weights.row(i));
            }
            push_row(&mut out, &layer.bias);
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, reason: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            reason,
        };
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| err(text.lines().count() + 1, format!("unexpected end of file, expected {what}")))
        };

        let (ln, magic) = next("header")?;
        if magic.trim() != MAGIC {
            return Err(err(ln, format!("expected `{MAGIC}`")));
        }
        let (ln, seed_line) = next("seed line")?;
        let init_seed = match seed_line.trim().strip_prefix("seed ") {
            Some("none") => None,
            Some(s) => Some(s.parse::<u64>().map_err(|e| err(ln, format!("seed: {e}")))?),
            None => return Err(err(ln, "expected `seed <value>`".into())),
        };
        let (ln, dims_line) = next("dims line")?;
        let dims = dims_line
            .trim()
            .strip_prefix("dims ")
            .ok_or_else(|| err(ln, "expected `dims ...`".into()))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| err(ln, format!("dim `{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if dims.len() < 2 || dims.contains(&0) {
            return Err(err(ln, format!("need at least two positive dims, got {dims:?}")));
        }
        let (ln, act_line) = next("activations line")?;
        let acts = act_line
            .trim()
            .strip_prefix("activations ")
            .ok_or_else(|| err(ln, "expected `activations ...`".into()))?
            .split_whitespace()
            .map(|t| t.parse::<Activation>().map_err(|e| err(ln, e)))
            .collect::<Result<Vec<_>>>()?;
        if acts.len() != dims.len() - 1 {
            return Err(err(ln, format!("{} activations for {} layers", acts.len(), dims.len() - 1)));
        }

        let mut layers = Vec::with_capacity(acts.len());
        for (l, &act) in acts.iter().enumerate() {
            let (ln, tag) = next("layer tag")?;
            if tag.trim() != format!("layer {}", l + 1) {
                return Err(err(ln, format!("expected `layer {}`", l + 1)));
            }
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let mut weights = Vec::with_capacity(fan_in * fan_out);
            let mut read_row = |expect: usize, what: &str, dst: &mut Vec<f64>| -> Result<()> {
                let (ln, row) = next(what)?;
                let before = dst.len();
                for t in row.split_whitespace() {
                    let v: f64 = t.parse().map_err(|e| err(ln, format!("{what} `{t}`: {e}")))?;
                    if !v.is_finite() {
                        return Err(err(ln, format!("non-finite {what}")));
                    }
                    dst.push(v);
                }
                if dst.len() - before != expect {
                    return Err(err(ln, format!("expected {expect} values, found {}", dst.len() - before)));
                }
                Ok(())
            };
            for _ in 0..fan_out {
                read_row(fan_in, "weight", &mut weights)?;
            }
            let mut bias = Vec::with_capacity(fan_out);
            read_row(fan_out, "bias", &mut bias)?;
            layers.push(DenseLayer {
                weights: DenseMatrix::from_vec_unchecked(fan_out, fan_in, weights),
                bias,
                activation: act,
            });
        }
        if let Some((ln, extra)) = lines.find(|(_, l)| !l.trim().is_empty()) {
            return Err(err(ln, format!("trailing content `{}`", extra.trim())));
        }
        let mut net = DenseNet::new(layers)?;
        net.init_seed = init_seed;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_text(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DenseNet {
        let mut net = DenseNet::seeded(
            &[2, 3, 4],
            &[Activation::LeakyRelu(0.2), Activation::Sigmoid],
            11,
        )
        .unwrap();
        net.layers_mut()[1].bias[2] = -1.0 / 3.0;
        net
    }

    #[test]
    fn round_trip_is_exact() {
        let net = sample();
        let back = DenseNet::from_text(&net.to_text(), Path::new("mem")).unwrap();
        assert_eq!(back, net);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.net");
        net.save(&p).unwrap();
        assert_eq!(DenseNet::load(&p).unwrap(), net);
    }

    #[test]
    fn truncated_file_reports_line() {
        let text = sample().to_text();
        let cut: String = text.lines().take(6).map(|l| format!("{l}\n")).collect();
        match DenseNet::from_text(&cut, Path::new("g.net")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_values_are_rejected() {
        let text = sample().to_text().replacen("layer 1\n", "layer 1\nx ", 1);
        assert!(matches!(
            DenseNet::from_text(&text, Path::new("g.net")),
            Err(Error::Parse { line: 6, .. })
        ));
        let text = sample().to_text().replace("dims 2 3 4", "dims 2 3");
        assert!(DenseNet::from_text(&text, Path::new("g.net")).is_err());
        assert!(DenseNet::from_text("", Path::new("g.net")).is_err());
    }
}
