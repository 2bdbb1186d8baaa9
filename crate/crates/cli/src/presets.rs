//! Named configurations.

use std::path::Path;

use dcl_core::latentspaces::{QSpec, Scenario};
use dcl_core::losses::LossKind;
use dcl_core::netmodels::AlphaMode;

use crate::config::{scenario_names, RunConfig};

/// Scenario/β rows of the synthetic identifiability tables.
pub const TABLE_ROWS: [(&str, f64); 11] = [
    ("box-simple", 0.5),
    ("box-simple", 1.0),
    ("box-simple", 3.0),
    ("box-simple", 5.0),
    ("box-complex", 1.0),
    ("box-complex", 3.0),
    ("hollow-ball", 1.0),
    ("hollow-ball", 3.0),
    ("hollow-ball", 5.0),
    ("cube-grid", 1.0),
    ("cube-grid", 5.0),
];

pub const TABLE_LOSSES: [LossKind; 4] = [LossKind::DeltaNce, LossKind::DeltaInce, LossKind::DeltaScl, LossKind::DeltaNwj];
pub const TABLE_SEEDS: usize = 2;

fn scenario(name: &str) -> Option<Scenario> {
    Some(match name {
        "box-simple" => Scenario::BoxSimple,
        "box-complex" => Scenario::box_complex(),
        "hollow-ball" => Scenario::hollow_ball(),
        "cube-grid" => Scenario::cube_grid(),
        _ => return None,
    })
}

/// Desk scale: `n = 4`, `B = 512`, `T = 2·10⁴`. Full scale uses the
/// published `n = 10`, `B = 5120`, `T = 3·10⁵`.
pub fn base(scen: &str, beta: f64, loss: LossKind, full: bool) -> Option<RunConfig> {
    let scenario = scenario(scen)?;
    let mut c = RunConfig { scenario: scenario.clone(), beta, loss, ..RunConfig::default() };
    if matches!(scenario, Scenario::BoxComplex { .. }) {
        c.q = QSpec::Checkerboard { low: 0.1 };
    }
    if full {
        c.n = 10;
        c.batch = 5120;
        c.iterations = 300_000;
        c.eval_every = 10_000;
    }
    Some(c)
}

/// `<scenario>-beta<β>-<loss>`, e.g. `box-simple-beta1-nce`.
pub fn train_preset(name: &str) -> Result<RunConfig, String> {
    let usage = || {
        let losses: Vec<&str> = LossKind::ALL.iter().map(|k| k.name()).collect();
        format!(
            "unknown preset `{name}`; expected <scenario>-beta<β>-<loss> with scenario in {{{}}} and loss in {{{}}}",
            scenario_names().join(", "),
            losses.join(", ")
        )
    };
    let (scen, rest) = name.split_once("-beta").ok_or_else(usage)?;
    let (beta, loss) = rest.split_once('-').ok_or_else(usage)?;
    let beta: f64 = beta.parse().map_err(|_| usage())?;
    let loss = LossKind::parse(loss).ok_or_else(usage)?;
    let mut c = base(scen, beta, loss, false).ok_or_else(usage)?;
    c.out_dir = Path::new("runs").join(name);
    Ok(c)
}

#[derive(Clone, Debug)]
pub struct TableCell {
    pub scenario: &'static str,
    pub beta: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub config: RunConfig,
}

/// Every (row, loss, seed) cell of a table; `constant_alpha` selects the
/// ablation where `α = α̃ = c`.
pub fn table_cells(constant_alpha: bool, full: bool, seeds: &[u64], out: &Path) -> Vec<TableCell> {
    let mut cells = Vec::new();
    for (scen, beta) in TABLE_ROWS {
        for loss in TABLE_LOSSES {
            for &seed in seeds {
                let mut config = base(scen, beta, loss, full).expect("table scenarios are known");
                if constant_alpha {
                    config.alpha_mode = AlphaMode::ConstantOnly;
                }
                config.seed = seed;
                config.mixer_seed = seed;
                config.out_dir = out.join(format!("{scen}-beta{beta}-{}-seed{seed}", loss.name()));
                cells.push(TableCell { scenario: scen, beta, loss, seed, config });
            }
        }
    }
    cells
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names() {
        let c = train_preset("box-simple-beta1-nce").unwrap();
        assert_eq!((c.n, c.batch, c.iterations, c.beta), (4, 512, 20_000, 1.0));
        assert_eq!(c.loss, LossKind::DeltaNce);
        let c = train_preset("box-complex-beta3-scl-original").unwrap();
        assert_eq!(c.q, QSpec::Checkerboard { low: 0.1 });
        assert!(train_preset("box-simple-beta1-hinge").is_err());
        assert!(train_preset("torus-beta1-nce").is_err());
        for name in ["cube-grid-beta0.5-nwj", "hollow-ball-beta5-ince"] {
            let c = train_preset(name).unwrap();
            assert_eq!(RunConfig::parse(&c.to_canonical()).unwrap(), c);
        }
    }

    #[test]
    fn table_layout() {
        let cells = table_cells(true, false, &[0, 1], Path::new("o"));
        assert_eq!(cells.len(), 11 * 4 * 2);
        assert!(cells.iter().all(|c| c.config.alpha_mode == AlphaMode::ConstantOnly));
        let full = table_cells(false, true, &[0], Path::new("o"));
        assert!(full.iter().all(|c| c.config.n == 10 && c.config.batch == 5120));
    }
}
