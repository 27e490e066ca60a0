//! Built-in systems, config-file loading, and named perturbations.
//!
//! System blocks are defined by expression strings over `t`, the state
//! coordinates `x1..xn` and the control coordinates `u1..um`; block `i` may
//! reference `t`, coordinates of blocks `1..=i`, and the coordinates of its
//! next argument (block `i+1`, or the control for the last block).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::expr::{parse_expr, Expr};
use crate::sysmodel::{BlockFn, BlockJacFn, TriangularSystem};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    pub name: String,
    /// `m_1..m_{nu+1}`; the last entry is the control dimension.
    pub dims: Vec<usize>,
    /// One expression string per output coordinate, one inner list per block.
    pub blocks: Vec<Vec<String>>,
    pub t0: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("block {block} coordinate {coord}: {source}")]
    Parse {
        block: usize,
        coord: usize,
        #[source]
        source: crate::expr::ParseError,
    },
    #[error("block {block} references `{var}`, which is not visible to it")]
    BadVariable { block: usize, var: String },
    #[error("expected {expected} blocks for dims {dims:?}, got {got}")]
    BlockCount {
        expected: usize,
        dims: Vec<usize>,
        got: usize,
    },
    #[error("block {block} must have {expected} coordinates, got {got}")]
    CoordCount {
        block: usize,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Sys(#[from] crate::sysmodel::SysError),
    #[error("unknown system `{0}`")]
    UnknownSystem(String),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Json(#[from] serde_json::Error),
}

/// Variable names visible to block `i` (zero-based): `t`, `x1..` up to the
/// end of block `i+1`'s coordinates for interior blocks, `u1..um` for the
/// last block's next argument.
fn visible_vars(dims: &[usize], block: usize) -> Vec<String> {
    let nu = dims.len() - 1;
    let mut vars = vec!["t".to_string()];
    let head_end: usize = dims[..=block].iter().sum();
    let next_len = dims[block + 1];
    for j in 0..head_end {
        vars.push(format!("x{}", j + 1));
    }
    if block + 1 < nu {
        for j in 0..next_len {
            vars.push(format!("x{}", head_end + j + 1));
        }
    } else {
        for j in 0..next_len {
            vars.push(format!("u{}", j + 1));
        }
    }
    vars
}

pub fn compile(config: &SystemConfig) -> Result<TriangularSystem, ConfigError> {
    let dims = config.dims.clone();
    let nu = dims.len().saturating_sub(1);
    if config.blocks.len() != nu {
        return Err(ConfigError::BlockCount {
            expected: nu,
            dims,
            got: config.blocks.len(),
        });
    }
    let mut blocks: Vec<BlockFn> = Vec::with_capacity(nu);
    for (i, coords) in config.blocks.iter().enumerate() {
        if coords.len() != dims[i] {
            return Err(ConfigError::CoordCount {
                block: i + 1,
                expected: dims[i],
                got: coords.len(),
            });
        }
        let mut parsed: Vec<Expr> = Vec::with_capacity(coords.len());
        let visible = visible_vars(&dims, i);
        for (c, src) in coords.iter().enumerate() {
            let e = parse_expr(src).map_err(|source| ConfigError::Parse {
                block: i + 1,
                coord: c + 1,
                source,
            })?;
            let mut used = Vec::new();
            e.variables(&mut used);
            for var in used {
                if !visible.contains(&var) {
                    return Err(ConfigError::BadVariable { block: i + 1, var });
                }
            }
            parsed.push(e);
        }
        let head_len: usize = dims[..=i].iter().sum();
        let is_last = i + 1 == nu;
        let block: BlockFn = Arc::new(move |t, head, next| {
            let lookup = |name: &str| -> Option<f64> {
                if name == "t" {
                    return Some(t);
                }
                if let Some(rest) = name.strip_prefix('x') {
                    let idx: usize = rest.parse().ok()?;
                    let idx = idx - 1;
                    if idx < head_len {
                        return Some(head[idx]);
                    }
                    if !is_last && idx < head_len + next.len() {
                        return Some(next[idx - head_len]);
                    }
                    return None;
                }
                if let Some(rest) = name.strip_prefix('u') {
                    if is_last {
                        let idx: usize = rest.parse().ok()?;
                        return next.get(idx - 1).copied();
                    }
                }
                None
            };
            parsed
                .iter()
                .map(|e| e.eval(&lookup).unwrap_or(f64::NAN))
                .collect()
        });
        blocks.push(block);
    }
    Ok(TriangularSystem::new(dims, blocks, config.t0, config.t_end)?)
}

/// The flagship singular system: `x1' = g(x2)`, `x2' = u` with `g` flat at 0
/// for `x2 <= 2` and `(x2-2)^2 sin(x2-2)` beyond.
fn example11_config() -> SystemConfig {
    SystemConfig {
        name: "example11".to_string(),
        dims: vec![1, 1, 1],
        blocks: vec![
            vec!["piecewise(x2 <= 2, 0, pow(x2-2,2)*sin(x2-2))".to_string()],
            vec!["u1".to_string()],
        ],
        t0: 0.0,
        t_end: 1.0,
    }
}

/// Variant with a logarithmic active branch (globally Lipschitz).
fn example11_log_config() -> SystemConfig {
    SystemConfig {
        name: "example11-log".to_string(),
        dims: vec![1, 1, 1],
        blocks: vec![
            vec!["piecewise(x2 <= 2, 0, pow(ln(x2-1),2)*sin(ln(x2-1)))".to_string()],
            vec!["u1".to_string()],
        ],
        t0: 0.0,
        t_end: 1.0,
    }
}

fn dblint_config() -> SystemConfig {
    SystemConfig {
        name: "dblint".to_string(),
        dims: vec![1, 1, 1],
        blocks: vec![vec!["x2".to_string()], vec!["u1".to_string()]],
        t0: 0.0,
        t_end: 1.0,
    }
}

/// Two blocks with a widening chain m = (1, 1, 2): the last block sees a
/// two-dimensional control of which only a selected column is inverted.
fn chain3_config() -> SystemConfig {
    SystemConfig {
        name: "chain3".to_string(),
        dims: vec![1, 1, 2],
        blocks: vec![
            vec!["x2".to_string()],
            vec!["u1 + 0.25*sin(u2) + 0.1*x1".to_string()],
        ],
        t0: 0.0,
        t_end: 1.0,
    }
}

pub fn builtin_configs() -> Vec<SystemConfig> {
    vec![
        example11_config(),
        example11_log_config(),
        dblint_config(),
        chain3_config(),
    ]
}

pub fn builtin_config(name: &str) -> Option<SystemConfig> {
    builtin_configs().into_iter().find(|c| c.name == name)
}

pub fn builtin(name: &str) -> Result<TriangularSystem, ConfigError> {
    let config = builtin_config(name).ok_or_else(|| ConfigError::UnknownSystem(name.to_string()))?;
    compile(&config)
}

/// Resolves `name` as a built-in first, then as a JSON config file path.
pub fn load_system(name: &str) -> Result<(SystemConfig, TriangularSystem), ConfigError> {
    if let Some(config) = builtin_config(name) {
        let sys = compile(&config)?;
        return Ok((config, sys));
    }
    let path = std::path::Path::new(name);
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        let config: SystemConfig = serde_json::from_str(&text)?;
        let sys = compile(&config)?;
        return Ok((config, sys));
    }
    Err(ConfigError::UnknownSystem(name.to_string()))
}

/// Double integrator on a custom window (used by tests and the acceptance
/// harness to vary the horizon).
pub fn dblint_on(t0: f64, t_end: f64) -> TriangularSystem {
    let mut config = dblint_config();
    config.t0 = t0;
    config.t_end = t_end;
    compile(&config).unwrap()
}

/// Double integrator with analytic block Jacobians installed.
pub fn dblint_analytic() -> TriangularSystem {
    let sys = builtin("dblint").unwrap();
    let j1_head: BlockJacFn = Arc::new(|_, _, _| nalgebra::dmatrix![0.0]);
    let j1_next: BlockJacFn = Arc::new(|_, _, _| nalgebra::dmatrix![1.0]);
    let j2_head: BlockJacFn = Arc::new(|_, _, _| nalgebra::dmatrix![0.0, 0.0]);
    let j2_next: BlockJacFn = Arc::new(|_, _, _| nalgebra::dmatrix![1.0]);
    sys.with_block_jacobians(0, Some(j1_head), Some(j1_next))
        .with_block_jacobians(1, Some(j2_head), Some(j2_next))
}

/// Named bounded perturbations selectable from the command line.
pub fn builtin_perturbation(
    name: &str,
    sys: &TriangularSystem,
) -> Option<crate::perturb::Perturbation> {
    use crate::perturb::Perturbation;
    let n = sys.state_dim();
    match name {
        // state-and-control coupled drift on the first coordinate
        "ex11-sin" if n == 2 => Some(Perturbation::new(
            name,
            Arc::new(|_t, x: &[f64], u: &[f64]| {
                let mut h = vec![0.0; x.len()];
                h[0] = 0.1 * (x[0] + u[0]).sin();
                h
            }),
            0.1,
            Some(0.1),
        )),
        // constant push on the second coordinate
        "const-02" if n == 2 => Some(Perturbation::new(
            name,
            Arc::new(|_t, x: &[f64], _u: &[f64]| {
                let mut h = vec![0.0; x.len()];
                h[1] = 0.2;
                h
            }),
            0.2,
            Some(0.0),
        )),
        "none" => Some(Perturbation::new(
            name,
            Arc::new(|_t, x: &[f64], _u: &[f64]| vec![0.0; x.len()]),
            0.0,
            Some(0.0),
        )),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn builtins_compile_and_validate() {
        for config in builtin_configs() {
            let sys = compile(&config).unwrap();
            let report = crate::sysmodel::validate_system(&sys, 32, 5);
            assert!(report.is_ok(), "{}: {:?}", config.name, report.violations);
        }
    }

    #[test]
    fn dsl_system_matches_hand_coded_closure() {
        // compiled expression blocks agree with a direct implementation to
        // 1e-12 on 1000 random points
        let sys = builtin("example11").unwrap();
        let g = |y: f64| {
            if y <= 2.0 {
                0.0
            } else {
                (y - 2.0).powi(2) * (y - 2.0).sin()
            }
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let t: f64 = rng.gen_range(0.0..1.0);
            let x = [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)];
            let u = [rng.gen_range(-6.0..6.0)];
            let rhs = sys.eval_rhs(t, &x, &u);
            assert!((rhs[0] - g(x[1])).abs() <= 1e-12);
            assert!((rhs[1] - u[0]).abs() <= 1e-12);
        }
    }

    #[test]
    fn block_visibility_enforced() {
        let config = SystemConfig {
            name: "bad".to_string(),
            dims: vec![1, 1, 1],
            blocks: vec![vec!["u1".to_string()], vec!["u1".to_string()]],
            t0: 0.0,
            t_end: 1.0,
        };
        // block 1 must not see the control
        let err = compile(&config).unwrap_err();
        assert!(matches!(err, ConfigError::BadVariable { block: 1, .. }));
    }

    #[test]
    fn chain3_exercises_widening_chain() {
        let sys = builtin("chain3").unwrap();
        assert_eq!(sys.dims(), &[1, 1, 2]);
        assert_eq!(sys.state_dim(), 2);
        assert_eq!(sys.control_dim(), 2);
        let rhs = sys.eval_rhs(0.0, &[1.0, 2.0], &[0.5, 0.0]);
        assert!((rhs[0] - 2.0).abs() < 1e-15);
        assert!((rhs[1] - (0.5 + 0.1)).abs() < 1e-15);
    }
}
