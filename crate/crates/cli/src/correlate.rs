use crate::boards::{read_boards, ReasoningBoard};
use prototta::metrics::{pearson, read_scores, spearman};
use prototta::{Error, Result};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRow {
    /// `pooled` or a method name.
    pub scope: String,
    pub n: usize,
    pub pearson: f64,
    pub spearman: f64,
}

/// Board PCA-W values paired with external scores. A score id may name a
/// board id or, when unambiguous, a bare sample id.
pub fn join_scores(boards: &[ReasoningBoard], scores: &[(String, f64)]) -> Result<Vec<(String, f64, f64)>> {
    let by_board: HashMap<&str, &ReasoningBoard> = boards.iter().map(|b| (b.board_id.as_str(), b)).collect();
    let mut by_sample: HashMap<&str, Vec<&ReasoningBoard>> = HashMap::new();
    for b in boards {
        by_sample.entry(b.sample_id.as_str()).or_default().push(b);
    }
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (id, score) in scores {
        let board = by_board.get(id.as_str()).copied().or_else(|| match by_sample.get(id.as_str()) {
            Some(v) if v.len() == 1 => Some(v[0]),
            _ => None,
        });
        let Some(board) = board else {
            unmatched.push(id.as_str());
            continue;
        };
        match board.pca_w()? {
            Some(v) => pairs.push((board.method.clone(), v, *score)),
            None => log::warn!("board {} has no positive contribution mass; skipped", board.board_id),
        }
    }
    if !unmatched.is_empty() {
        log::warn!("{} score ids matched no board: {}", unmatched.len(), unmatched.join(", "));
    }
    Ok(pairs)
}

/// Pooled and per-method correlations between board PCA-W and scores.
pub fn correlations(pairs: &[(String, f64, f64)]) -> Result<Vec<CorrelationRow>> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientData(format!("{} matched samples; at least 3 are needed", pairs.len())));
    }
    let row = |scope: &str, x: &[f64], y: &[f64]| -> Result<CorrelationRow> {
        Ok(CorrelationRow { scope: scope.to_string(), n: x.len(), pearson: pearson(x, y)?, spearman: spearman(x, y)? })
    };
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().map(|(_, a, b)| (*a, *b)).unzip();
    let mut rows = vec![row("pooled", &x, &y)?];
    let mut by_method: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (m, a, b) in pairs {
        let e = by_method.entry(m.as_str()).or_default();
        e.0.push(*a);
        e.1.push(*b);
    }
    if by_method.len() > 1 {
        for (m, (x, y)) in by_method {
            match row(m, &x, &y) {
                Ok(r) => rows.push(r),
                Err(e) => log::warn!("no correlation for method {m}: {e}"),
            }
        }
    }
    Ok(rows)
}

/// Reads boards and a `sample_id,score` CSV, writes `correlations.csv` to
/// `out`.
pub fn correlate_scores(boards_dir: &Path, scores_csv: &Path, out: &Path) -> Result<Vec<CorrelationRow>> {
    let boards = read_boards(boards_dir)?;
    let scores = read_scores(scores_csv)?;
    let rows = correlations(&join_scores(&boards, &scores)?)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["scope", "n", "pearson", "spearman"])?;
    for r in &rows {
        w.write_record([r.scope.clone(), r.n.to_string(), r.pearson.to_string(), r.spearman.to_string()])?;
    }
    w.flush()?;
    Ok(rows)
}
