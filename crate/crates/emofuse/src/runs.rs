//! Multi-run experiments: the fusion/stage ablation grid and the
//! compressed-token-count sweep.

use std::path::Path;
use std::time::Instant;

use emofuse_core::model::{Ablation, FusionKind};
use emofuse_core::synth::Dataset;
use emofuse_core::train::{train, RunConfig};

use crate::error::Result;
use crate::rundir::{opt, Table};

/// Compressed visual token counts tried by the sweep.
pub const SWEEP_SIZES: [usize; 7] = [16, 32, 64, 96, 128, 147, 196];

#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub selection_precision: Option<f64>,
    pub runtime_s: f64,
}

/// Trains and tests one configuration; failures come back as text so a
/// grid can carry on.
pub fn run_cell(cfg: &RunConfig, ds: &Dataset) -> Result<Scores, String> {
    let t0 = Instant::now();
    let out = train(cfg, ds, &mut |_| {}).map_err(|e| e.to_string())?;
    Ok(Scores {
        accuracy: out.report.accuracy,
        macro_f1: out.report.macro_f1,
        selection_precision: out.report.selection_precision,
        runtime_s: t0.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub fusion: FusionKind,
    pub ablation: Ablation,
    pub result: Result<Scores, String>,
}

/// The four fusion variants with the base stage flags, then the eight
/// stage combinations with transformer fusion.
pub fn ablation_cells(base: &RunConfig) -> Vec<(FusionKind, Ablation)> {
    let mut cells: Vec<_> = FusionKind::ALL.iter().map(|&k| (k, base.model.ablation)).collect();
    cells.extend(Ablation::grid().iter().map(|&a| (FusionKind::Transformer, a)));
    cells
}

/// Runs every cell on the same data and seeds. A cell identical to an
/// earlier one reuses its result, since runs are deterministic.
pub fn ablate(base: &RunConfig, ds: &Dataset, on_row: &mut dyn FnMut(&AblationRow)) -> Vec<AblationRow> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for (fusion, ablation) in ablation_cells(base) {
        let result = match rows.iter().find(|r| r.fusion == fusion && r.ablation == ablation) {
            Some(prev) => prev.result.clone(),
            None => {
                let mut cfg = *base;
                cfg.model.kind = fusion;
                cfg.model.ablation = ablation;
                run_cell(&cfg, ds)
            }
        };
        let row = AblationRow {
            fusion,
            ablation,
            result,
        };
        on_row(&row);
        rows.push(row);
    }
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n: usize,
    pub result: Result<Scores, String>,
}

/// One run per compressed token count, everything else fixed.
pub fn sweep_n(base: &RunConfig, ds: &Dataset, sizes: &[usize], on_row: &mut dyn FnMut(&SweepRow)) -> Vec<SweepRow> {
    sizes
        .iter()
        .map(|&n| {
            let mut cfg = *base;
            cfg.model.compressor.queries = n;
            let row = SweepRow {
                n,
                result: run_cell(&cfg, ds),
            };
            on_row(&row);
            row
        })
        .collect()
}

fn score_fields(r: &Result<Scores, String>) -> [String; 5] {
    match r {
        Ok(s) => [
            format!("{}", s.accuracy),
            format!("{}", s.macro_f1),
            opt(s.selection_precision),
            format!("{:.3}", s.runtime_s),
            String::new(),
        ],
        Err(e) => [String::new(), String::new(), String::new(), String::new(), e.clone()],
    }
}

pub struct AblationTable(Table);

impl AblationTable {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self(Table::create(
            path,
            &["fusion", "stages", "accuracy", "macro_f1", "selection_precision", "runtime_s", "error"],
        )?))
    }

    pub fn push(&mut self, row: &AblationRow) -> Result<()> {
        let mut fields = vec![row.fusion.name().to_string(), row.ablation.label()];
        fields.extend(score_fields(&row.result));
        self.0.row(fields)
    }
}

pub struct SweepTable(Table);

impl SweepTable {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self(Table::create(
            path,
            &["n", "accuracy", "macro_f1", "runtime_s", "error"],
        )?))
    }

    pub fn push(&mut self, row: &SweepRow) -> Result<()> {
        let [acc, f1, _, secs, err] = score_fields(&row.result);
        self.0.row([row.n.to_string(), acc, f1, secs, err])
    }
}
