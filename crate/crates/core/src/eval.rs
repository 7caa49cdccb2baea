//! Side-effect-free evaluation against the winner-takes-all baseline.

use std::fmt::Write as _;
use std::thread;

use crate::data::PairRecord;
use crate::error::{arg_err, Result};
use crate::flow::{aepe_masked, argmax_flow, mean, pck, transfer_keypoints, FlowField, PckBasis};
use crate::graph::Graph;
use crate::model::Model;
use crate::params::ParamStore;

/// Model and baseline outputs for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub flow: FlowField,
    pub wta_flow: FlowField,
    pub src_points: Vec<(f64, f64)>,
    pub gt_points: Vec<(f64, f64)>,
    pub pred_points: Vec<(f64, f64)>,
    pub wta_points: Vec<(f64, f64)>,
}

pub fn predict(model: &Model, store: &ParamStore<f32>, pair: &PairRecord) -> Result<Prediction> {
    let mut g = Graph::<f32>::infer();
    let fwd = model.forward(&mut g, store, &pair.source, &pair.target)?;
    let flow = FlowField::new(g.value(fwd.flow).cast())?;
    drop(g);
    let raw = model.raw_correlation(store, &pair.source, &pair.target)?;
    let wta_flow = argmax_flow(&raw, model.grid)?;
    let (src, gt) = pair.keypoints()?;
    let pred_points = transfer_keypoints(&flow, &src)?;
    let wta_points = transfer_keypoints(&wta_flow, &src)?;
    Ok(Prediction { flow, wta_flow, src_points: src.points, gt_points: gt.points, pred_points, wta_points })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub id: usize,
    pub aepe: f64,
    pub pck: Vec<f64>,
    pub wta_aepe: f64,
    pub wta_pck: Vec<f64>,
}

/// AEPE is averaged over cells whose ground-truth target lies inside the
/// grid; PCK uses the image basis.
pub fn pair_metrics(id: usize, pair: &PairRecord, p: &Prediction, alphas: &[f64]) -> Result<PairMetrics> {
    let (h, w) = pair.image_size();
    let basis = PckBasis::Image { height: h, width: w };
    let mask = pair.valid_mask();
    let pcks = |pts: &[(f64, f64)]| alphas.iter().map(|&a| pck(pts, &p.gt_points, a, basis)).collect::<Result<Vec<_>>>();
    Ok(PairMetrics {
        id,
        aepe: aepe_masked(&p.flow, &pair.flow, Some(&mask))?,
        pck: pcks(&p.pred_points)?,
        wta_aepe: aepe_masked(&p.wta_flow, &pair.flow, Some(&mask))?,
        wta_pck: pcks(&p.wta_points)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub aepe: f64,
    pub pck: Vec<f64>,
    pub wta_aepe: f64,
    pub wta_pck: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub alphas: Vec<f64>,
    pub rows: Vec<PairMetrics>,
}

impl Report {
    /// Means of the per-pair values.
    pub fn summary(&self) -> Summary {
        let col = |f: &dyn Fn(&PairMetrics) -> f64| mean(&self.rows.iter().map(f).collect::<Vec<_>>());
        Summary {
            aepe: col(&|r| r.aepe),
            pck: (0..self.alphas.len()).map(|i| col(&|r| r.pck[i])).collect(),
            wta_aepe: col(&|r| r.wta_aepe),
            wta_pck: (0..self.alphas.len()).map(|i| col(&|r| r.wta_pck[i])).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let cols = |s: &mut String, aepe: f64, pck: &[f64], wta_aepe: f64, wta: &[f64]| {
            let _ = write!(s, " aepe={aepe:.8}");
            for (a, v) in self.alphas.iter().zip(pck) {
                let _ = write!(s, " pck@{a}={v:.8}");
            }
            for (a, v) in self.alphas.iter().zip(wta) {
                let _ = write!(s, " wta_pck@{a}={v:.8}");
            }
            let _ = writeln!(s, " wta_aepe={wta_aepe:.8}");
        };
        for r in &self.rows {
            let _ = write!(s, "pair={}", r.id);
            cols(&mut s, r.aepe, &r.pck, r.wta_aepe, &r.wta_pck);
        }
        let m = self.summary();
        let _ = write!(s, "summary pairs={}", self.rows.len());
        cols(&mut s, m.aepe, &m.pck, m.wta_aepe, &m.wta_pck);
        s
    }
}

/// Evaluates every pair, fanning out over `threads` scoped threads in
/// contiguous chunks; rows come back in input order.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    pairs: &[PairRecord],
    alphas: &[f64],
    threads: usize,
) -> Result<Report> {
    if pairs.is_empty() {
        return Err(arg_err!("no pairs to evaluate"));
    }
    let run = |offset: usize, chunk: &[PairRecord]| -> Result<Vec<PairMetrics>> {
        chunk
            .iter()
            .enumerate()
            .map(|(i, pair)| pair_metrics(offset + i, pair, &predict(model, store, pair)?, alphas))
            .collect()
    };
    let threads = threads.clamp(1, pairs.len());
    let rows = if threads == 1 {
        run(0, pairs)?
    } else {
        let size = pairs.len().div_ceil(threads);
        let results: Vec<Result<Vec<PairMetrics>>> = thread::scope(|s| {
            let handles: Vec<_> = pairs
                .chunks(size)
                .enumerate()
                .map(|(c, chunk)| s.spawn(move || run(c * size, chunk)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
        });
        let mut rows = Vec::with_capacity(pairs.len());
        for r in results {
            rows.extend(r?);
        }
        rows
    };
    Ok(Report { alphas: alphas.to_vec(), rows })
}
