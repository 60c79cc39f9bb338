//! Plain-text weights format.
//!
//! ```text
//! purex-nmpc-surrogate 1
//! n_hist <N>
//! norm_lo <y> <u> <q>
//! norm_hi <y> <u> <q>
//! linear <dim>
//! <dim weights>
//! bias <b>
//! lstm <input> <hidden> <layers> <n_params>
//! scale <s>
//! <n_params values, 8 per line>
//! classifier <n_sizes> <sizes...> <n_params>
//! <n_params values, 8 per line>
//! end
//! ```
//!
//! Floats are written in shortest round-trip form, so a reload is exact.

use std::fmt::Write as _;
use std::path::Path;

use super::dataset::MAX_HIST;
use super::{
    BinaryClassifier, LinearModel, Normalizer, RecurrentResidualNet, SurrogateModel, N_SIGNALS,
};
use crate::error::{Error, Result};

pub const WEIGHTS_VERSION: u32 = 1;
const MAGIC: &str = "purex-nmpc-surrogate";

fn push_values(out: &mut String, values: &[f64]) {
    for chunk in values.chunks(8) {
        let line: Vec<String> = chunk.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
}

pub fn to_text(model: &SurrogateModel) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC} {WEIGHTS_VERSION}");
    let _ = writeln!(s, "n_hist {}", model.n_hist);
    let f = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:e}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let _ = writeln!(s, "norm_lo {}", f(&model.norm.lo));
    let _ = writeln!(s, "norm_hi {}", f(&model.norm.hi));
    let _ = writeln!(s, "linear {}", model.linear.weights.len());
    push_values(&mut s, &model.linear.weights);
    let _ = writeln!(s, "bias {:e}", model.linear.bias);
    let n = &model.net;
    let _ = writeln!(
        s,
        "lstm {} {} {} {}",
        n.input,
        n.hidden,
        n.layers,
        n.params.len()
    );
    let _ = writeln!(s, "scale {:e}", n.output_scale);
    push_values(&mut s, &n.params);
    let c = &model.classifier;
    let sizes: Vec<String> = c.sizes.iter().map(|v| v.to_string()).collect();
    let _ = writeln!(
        s,
        "classifier {} {} {}",
        c.sizes.len(),
        sizes.join(" "),
        c.params.len()
    );
    push_values(&mut s, &c.params);
    s.push_str("end\n");
    s
}

pub fn save_weights(model: &SurrogateModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(model)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<SurrogateModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}

struct Tokens<'a> {
    it: std::iter::Peekable<std::str::SplitWhitespace<'a>>,
}

impl<'a> Tokens<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        self.it
            .next()
            .ok_or_else(|| Error::Weights(format!("unexpected end of file while reading {what}")))
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        let t = self.next(kw)?;
        if t != kw {
            return Err(Error::Weights(format!("expected `{kw}`, found `{t}`")));
        }
        Ok(())
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let t = self.next(what)?;
        t.parse()
            .map_err(|_| Error::Weights(format!("bad integer `{t}` for {what}")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let t = self.next(what)?;
        let v: f64 = t
            .parse()
            .map_err(|_| Error::Weights(format!("bad number `{t}` for {what}")))?;
        if !v.is_finite() {
            return Err(Error::Weights(format!("non-finite value for {what}")));
        }
        Ok(v)
    }

    fn vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64(what)).collect()
    }
}

pub fn from_text(text: &str) -> Result<SurrogateModel> {
    let mut t = Tokens {
        it: text.split_whitespace().peekable(),
    };
    t.keyword(MAGIC)?;
    let version = t.usize("version")?;
    if version != WEIGHTS_VERSION as usize {
        return Err(Error::Weights(format!(
            "unsupported weights version {version} (expected {WEIGHTS_VERSION})"
        )));
    }
    t.keyword("n_hist")?;
    let n_hist = t.usize("n_hist")?;
    if n_hist == 0 || n_hist > MAX_HIST {
        return Err(Error::Weights(format!("n_hist {n_hist} out of range")));
    }
    let dim = N_SIGNALS * (n_hist + 1);
    t.keyword("norm_lo")?;
    let lo = t.vec(N_SIGNALS, "norm_lo")?;
    t.keyword("norm_hi")?;
    let hi = t.vec(N_SIGNALS, "norm_hi")?;
    let norm = Normalizer::new([lo[0], lo[1], lo[2]], [hi[0], hi[1], hi[2]])
        .map_err(|e| Error::Weights(e.to_string()))?;

    t.keyword("linear")?;
    let ld = t.usize("linear dimension")?;
    if ld != dim {
        return Err(Error::Weights(format!(
            "linear dimension {ld} does not match θ dimension {dim}"
        )));
    }
    let weights = t.vec(ld, "linear weights")?;
    t.keyword("bias")?;
    let bias = t.f64("bias")?;

    t.keyword("lstm")?;
    let input = t.usize("lstm input")?;
    let hidden = t.usize("lstm hidden")?;
    let layers = t.usize("lstm layers")?;
    let np = t.usize("lstm parameter count")?;
    if input != N_SIGNALS || hidden == 0 || hidden > 256 || layers == 0 || layers > 16 {
        return Err(Error::Weights(format!(
            "unsupported LSTM shape input={input} hidden={hidden} layers={layers}"
        )));
    }
    t.keyword("scale")?;
    let output_scale = t.f64("scale")?;
    let net = RecurrentResidualNet {
        input,
        hidden,
        layers,
        output_scale,
        params: t.vec(np, "lstm parameters")?,
    };
    net.validate()
        .map_err(|e| Error::Weights(format!("LSTM shape: {e}")))?;

    t.keyword("classifier")?;
    let ns = t.usize("classifier layer count")?;
    if !(2..=16).contains(&ns) {
        return Err(Error::Weights(format!(
            "classifier layer count {ns} out of range"
        )));
    }
    let sizes = (0..ns)
        .map(|_| t.usize("classifier width"))
        .collect::<Result<Vec<_>>>()?;
    if sizes[0] != dim {
        return Err(Error::Weights(format!(
            "classifier input {} does not match θ dimension {dim}",
            sizes[0]
        )));
    }
    let cp = t.usize("classifier parameter count")?;
    let classifier = BinaryClassifier {
        sizes,
        params: t.vec(cp, "classifier parameters")?,
    };
    classifier
        .validate()
        .map_err(|e| Error::Weights(format!("classifier shape: {e}")))?;
    t.keyword("end")?;
    if let Some(extra) = t.it.next() {
        return Err(Error::Weights(format!(
            "trailing data after `end`: `{extra}`"
        )));
    }
    Ok(SurrogateModel {
        n_hist,
        norm,
        linear: LinearModel { weights, bias },
        net,
        classifier,
    })
}
