//! Confusion-matrix metrics, average precision and misclassification export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{load_image, save_png, Label};

/// Class scores of one evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub scores: [f64; 3],
    pub label: Label,
    pub path: String,
}

impl ScoreRecord {
    /// Argmax of the scores, ties to the lowest class index.
    pub fn predicted(&self) -> Label {
        let mut best = 0;
        for i in 1..3 {
            if self.scores[i] > self.scores[best] {
                best = i;
            }
        }
        Label::ALL[best]
    }
}

/// `counts[true][predicted]` in the canonical class order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix3 {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix3 {
    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn column_sum(&self, j: usize) -> u64 {
        (0..3).map(|i| self.counts[i][j]).sum()
    }

    pub fn total(&self) -> u64 {
        (0..3).map(|i| self.row_sum(i)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        (0..3).map(|i| self.counts[i][i]).sum::<u64>() as f64 / self.total().max(1) as f64
    }
}

pub fn confusion_matrix(records: &[ScoreRecord]) -> Result<ConfusionMatrix3> {
    if records.is_empty() {
        return Err(Error::Param("confusion matrix of no records".into()));
    }
    let mut c = ConfusionMatrix3::default();
    for r in records {
        c.counts[r.label.index()][r.predicted().index()] += 1;
    }
    Ok(c)
}

/// Column-normalized diagonal; `None` where nothing was predicted as that
/// class.
pub fn precision_per_class(c: &ConfusionMatrix3) -> [Option<f64>; 3] {
    std::array::from_fn(|i| {
        let col = c.column_sum(i);
        (col > 0).then(|| c.counts[i][i] as f64 / col as f64)
    })
}

/// Unweighted mean of the three class precisions.
pub fn macro_precision(p: &[Option<f64>; 3]) -> Result<f64> {
    let mut sum = 0.0;
    for (i, v) in p.iter().enumerate() {
        match v {
            Some(v) => sum += v,
            None => return Err(Error::Undefined(format!("precision of {} is undefined", Label::ALL[i]))),
        }
    }
    Ok(sum / 3.0)
}

/// Mean over the defined class precisions only, warning about the rest.
pub fn macro_precision_defined(p: &[Option<f64>; 3]) -> f64 {
    for (i, v) in p.iter().enumerate() {
        if v.is_none() {
            log::warn!("no predictions for {}; its precision is excluded from the macro mean", Label::ALL[i]);
        }
    }
    mean_of_defined(p)
}

pub(crate) fn mean_of_defined(p: &[Option<f64>; 3]) -> f64 {
    let defined: Vec<f64> = p.iter().flatten().copied().collect();
    if defined.is_empty() {
        return 0.0;
    }
    defined.iter().sum::<f64>() / defined.len() as f64
}

/// Step-rule average precision `Σ_k (R_k − R_{k−1})·P_k`, thresholds at the
/// distinct scores in descending order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), positive.len())));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::Undefined("average precision needs at least one positive".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Param("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if positive[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Macro one-vs-rest average precision over the three classes.
pub fn auprc(records: &[ScoreRecord]) -> Result<f64> {
    let mut total = 0.0;
    for class in Label::ALL {
        let scores: Vec<f64> = records.iter().map(|r| r.scores[class.index()]).collect();
        let positive: Vec<bool> = records.iter().map(|r| r.label == class).collect();
        total += average_precision(&scores, &positive).map_err(|_| {
            Error::Undefined(format!("AUPRC undefined: no {class} samples among the records"))
        })?;
    }
    Ok(total / 3.0)
}

pub const SCORES_CSV_HEADER: [&str; 5] = ["path", "label", "silicone_oil", "air_bubble", "protein"];

/// Per-image scores as CSV (`path,label,silicone_oil,air_bubble,protein`).
pub fn write_scores_csv(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SCORES_CSV_HEADER)?;
    for r in records {
        let s = r.scores.map(|v| v.to_string());
        w.write_record([r.path.as_str(), r.label.as_str(), &s[0], &s[1], &s[2]])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().collect::<Vec<_>>() != SCORES_CSV_HEADER {
        return Err(Error::Manifest(format!("{}: header must be {}", path.display(), SCORES_CSV_HEADER.join(","))));
    }
    let bad = |row: usize, what: &str| Error::Decode { path: path.into(), reason: format!("row {row}: {what}") };
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let label: Label = rec[1].parse()?;
        let mut scores = [0.0; 3];
        for (k, v) in scores.iter_mut().enumerate() {
            *v = rec[2 + k].parse().map_err(|_| bad(i + 1, "score is not a number"))?;
        }
        out.push(ScoreRecord { scores, label, path: rec[0].to_string() });
    }
    Ok(out)
}

pub const MISCLASSIFIED_INDEX: &str = "index.csv";

/// Copies the `top_k` most confident mistakes of every (true, predicted)
/// pair into `out_dir/<true>_as_<pred>/` and writes `index.csv`
/// (`path,true,pred,score`, paths relative to `out_dir`). Source paths are
/// resolved against `root`. Returns the exported files.
pub fn export_misclassified(records: &[ScoreRecord], root: &Path, out_dir: &Path, top_k: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut w = csv::Writer::from_path(out_dir.join(MISCLASSIFIED_INDEX))?;
    w.write_record(["path", "true", "pred", "score"])?;
    let mut exported = Vec::new();
    for truth in Label::ALL {
        for pred in Label::ALL {
            if truth == pred {
                continue;
            }
            let mut cell: Vec<&ScoreRecord> =
                records.iter().filter(|r| r.label == truth && r.predicted() == pred).collect();
            cell.sort_by(|a, b| b.scores[pred.index()].total_cmp(&a.scores[pred.index()]).then(a.path.cmp(&b.path)));
            for (rank, r) in cell.into_iter().take(top_k).enumerate() {
                let stem = Path::new(&r.path).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let rel = PathBuf::from(format!("{truth}_as_{pred}")).join(format!("{rank:03}_{stem}.png"));
                let dest = out_dir.join(&rel);
                fs::create_dir_all(dest.parent().unwrap()).map_err(|e| Error::io(&dest, e))?;
                save_png(&dest, &load_image(root.join(&r.path))?)?;
                w.write_record([
                    rel.to_string_lossy().as_ref(),
                    truth.as_str(),
                    pred.as_str(),
                    &format!("{:.6}", r.scores[pred.index()]),
                ])?;
                exported.push(dest);
            }
        }
    }
    w.flush().map_err(|e| Error::io(out_dir.join(MISCLASSIFIED_INDEX), e))?;
    Ok(exported)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(scores: [f64; 3], label: Label) -> ScoreRecord {
        ScoreRecord { scores, label, path: String::new() }
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        assert_eq!(rec([0.4, 0.4, 0.2], Label::Protein).predicted(), Label::SiliconeOil);
        assert_eq!(rec([0.2, 0.4, 0.4], Label::Protein).predicted(), Label::AirBubble);
        assert_eq!(rec([1.0 / 3.0; 3], Label::Protein).predicted(), Label::SiliconeOil);
    }

    #[test]
    fn worked_average_precision() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, true, false, true]).unwrap();
        assert!((ap - 0.916_666_666_666_666_6).abs() < 1e-12);
        assert!(average_precision(&[0.1], &[false]).is_err());
    }

    #[test]
    fn column_precision_example() {
        let c = ConfusionMatrix3 { counts: [[8, 1, 1], [0, 9, 1], [2, 0, 8]] };
        let p = precision_per_class(&c);
        assert_eq!(p, [Some(0.8), Some(0.9), Some(0.8)]);
        let zero_col = ConfusionMatrix3 { counts: [[3, 0, 1], [1, 0, 1], [0, 0, 4]] };
        assert_eq!(precision_per_class(&zero_col)[1], None);
        assert!(macro_precision(&precision_per_class(&zero_col)).is_err());
    }
}
