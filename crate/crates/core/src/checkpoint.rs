//! Plain-text checkpoints of hypergrid parameters.
//!
//! ```text
//! subgfn-checkpoint 1
//! env hypergrid dim=2 horizon=8 r0=0.1 interval=open
//! backward uniform
//! values 257
//! <one value per line, in flat parameter order>
//! ```
//!
//! Values are written in Rust's shortest round-trip float form, so a
//! save/load cycle is bit exact.

use std::io::{BufRead, Write};

use crate::env::Hypergrid;
use crate::error::{Error, Result};
use crate::model::{BackwardMode, FlowParams, InitScheme};

const MAGIC: &str = "subgfn-checkpoint 1";

fn env_line(env: &Hypergrid) -> String {
    format!(
        "env hypergrid dim={} horizon={} r0={} interval={}",
        env.dim(),
        env.horizon(),
        env.r0(),
        env.closure().as_str()
    )
}

pub fn save<W: Write>(params: &FlowParams, env: &Hypergrid, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "{}", env_line(env))?;
    let mode = match params.backward_mode() {
        BackwardMode::Uniform => "uniform",
        BackwardMode::Learned => "learned",
    };
    writeln!(out, "backward {mode}")?;
    writeln!(out, "values {}", params.len())?;
    for v in params.values() {
        writeln!(out, "{v}")?;
    }
    out.flush()
}

/// Reads a checkpoint written for `env`. The header must match `env` exactly.
pub fn load<R: BufRead>(env: &Hypergrid, input: R) -> Result<FlowParams> {
    let mut lines = input.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing {what}")))?
            .map_err(|e| Error::Checkpoint(e.to_string()))
    };
    if next("header")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let found = next("environment line")?;
    if found != env_line(env) {
        return Err(Error::Checkpoint(format!(
            "environment mismatch: file has `{found}`, expected `{}`",
            env_line(env)
        )));
    }
    let mode = match next("backward mode")?.as_str() {
        "backward uniform" => BackwardMode::Uniform,
        "backward learned" => BackwardMode::Learned,
        other => return Err(Error::Checkpoint(format!("bad backward line `{other}`"))),
    };
    let mut params = FlowParams::new(env, InitScheme::Zeros, mode);
    let count: usize = next("value count")?
        .strip_prefix("values ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Checkpoint("bad value count line".into()))?;
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} values, file declares {count}",
            params.len()
        )));
    }
    for i in 0..count {
        let line = next("parameter value")?;
        params.values_mut()[i] = line
            .trim()
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad value `{line}` at index {i}")))?;
    }
    params.check_finite()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(seed in any::<u64>(), learned in any::<bool>()) {
            let env = Hypergrid::new(2, 3, 0.1).unwrap();
            let mode = if learned { BackwardMode::Learned } else { BackwardMode::Uniform };
            let params = FlowParams::new(&env, InitScheme::Uniform { scale: 3.0, seed }, mode);
            let mut buf = Vec::new();
            save(&params, &env, &mut buf).unwrap();
            let back = load(&env, buf.as_slice()).unwrap();
            prop_assert_eq!(back, params);
        }
    }

    #[test]
    fn rejects_other_env() {
        let env = Hypergrid::new(2, 3, 0.1).unwrap();
        let mut buf = Vec::new();
        save(&FlowParams::zeros(&env), &env, &mut buf).unwrap();
        let other = Hypergrid::new(2, 3, 0.2).unwrap();
        assert!(matches!(load(&other, buf.as_slice()), Err(Error::Checkpoint(_))));
        assert!(load(&env, &b"garbage\n"[..]).is_err());
        let truncated = &buf[..buf.len() - 4];
        assert!(load(&env, truncated).is_err());
    }
}
