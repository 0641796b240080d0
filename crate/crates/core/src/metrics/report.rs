use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{boundary_points, dice, e1, e2_from_rates, fp_fn_rates, normalized_hausdorff, BinaryMask};
use crate::error::{Error, Result};

/// Scores for one test image. Localization fields are `None` when only
/// segmentation masks were evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub e1: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub dice_inner: Option<f64>,
    pub dice_outer: Option<f64>,
    /// Normalized Hausdorff distance between inner boundaries.
    pub hdis_inner: Option<f64>,
    /// Normalized Hausdorff distance between outer boundaries.
    pub hdis_outer: Option<f64>,
}

/// Predicted and ground-truth region masks for the inner and outer iris boundaries.
pub struct LocalizationPair<'a> {
    pub pred_inner: &'a BinaryMask,
    pub gt_inner: &'a BinaryMask,
    pub pred_outer: &'a BinaryMask,
    pub gt_outer: &'a BinaryMask,
}

/// Normalized Hausdorff between region boundaries with the empty-set
/// policy: both empty → 0, exactly one empty → 1 (worst score).
fn region_hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::dim(format!(
            "hausdorff: mask dims {:?} and {:?} differ",
            pred.dims(),
            gt.dims()
        )));
    }
    let (a, b) = (boundary_points(pred), boundary_points(gt));
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Ok(0.0),
        (true, false) | (false, true) => Ok(1.0),
        (false, false) => normalized_hausdorff(&a, &b, pred.height(), pred.width()),
    }
}

pub fn evaluate_image(
    id: impl Into<String>,
    pred: &BinaryMask,
    gt: &BinaryMask,
    loc: Option<LocalizationPair<'_>>,
) -> Result<ImageRecord> {
    let e = e1(pred, gt)?;
    let (fp, fn_) = fp_fn_rates(pred, gt)?;
    let mut rec = ImageRecord {
        id: id.into(),
        e1: e,
        fp,
        fn_,
        dice_inner: None,
        dice_outer: None,
        hdis_inner: None,
        hdis_outer: None,
    };
    if let Some(l) = loc {
        rec.dice_inner = Some(dice(l.pred_inner, l.gt_inner)?);
        rec.dice_outer = Some(dice(l.pred_outer, l.gt_outer)?);
        rec.hdis_inner = Some(region_hausdorff(l.pred_inner, l.gt_inner)?);
        rec.hdis_outer = Some(region_hausdorff(l.pred_outer, l.gt_outer)?);
    }
    Ok(rec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub e1: f64,
    pub e2: f64,
    /// Mean over images of `(dice_inner + dice_outer) / 2`.
    pub mdice: Option<f64>,
    /// Mean over images of `(hdis_inner + hdis_outer) / 2`.
    pub mhdis: Option<f64>,
    pub records: Vec<ImageRecord>,
}

fn pair_mean(records: &[ImageRecord], f: impl Fn(&ImageRecord) -> Option<(f64, f64)>) -> Option<f64> {
    let pairs: Option<Vec<_>> = records.iter().map(f).collect();
    pairs.map(|p| p.iter().map(|(a, b)| (a + b) / 2.0).sum::<f64>() / p.len() as f64)
}

/// Batch aggregates; mDice and mHdis are present only when every record
/// carries localization scores.
pub fn aggregate(records: Vec<ImageRecord>) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no image records to aggregate".into()));
    }
    let n = records.len();
    let e1 = records.iter().map(|r| r.e1).sum::<f64>() / n as f64;
    let rates: Vec<_> = records.iter().map(|r| (r.fp, r.fn_)).collect();
    let e2 = e2_from_rates(&rates)?;
    let mdice = pair_mean(&records, |r| r.dice_inner.zip(r.dice_outer));
    let mhdis = pair_mean(&records, |r| r.hdis_inner.zip(r.hdis_outer));
    Ok(EvalReport {
        n,
        e1,
        e2,
        mdice,
        mhdis,
        records,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per image: `id,e1,fp,fn,dice_inner,dice_outer,hdis_inner,hdis_outer`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "id",
            "e1",
            "fp",
            "fn",
            "dice_inner",
            "dice_outer",
            "hdis_inner",
            "hdis_outer",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.id.clone(),
                r.e1.to_string(),
                r.fp.to_string(),
                r.fn_.to_string(),
                opt(r.dice_inner),
                opt(r.dice_outer),
                opt(r.hdis_inner),
                opt(r.hdis_outer),
            ])?;
        }
        w.flush().map_err(|e| Error::io("csv output", e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, di: f64, dout: f64) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            e1: 0.1,
            fp: 0.2,
            fn_: 0.0,
            dice_inner: Some(di),
            dice_outer: Some(dout),
            hdis_inner: Some(0.0),
            hdis_outer: Some(0.0),
        }
    }

    #[test]
    fn mdice_of_one_image() {
        let r = aggregate(vec![rec("a", 1.0, 0.5)]).unwrap();
        assert_eq!(r.mdice, Some(0.75));
        assert_eq!(r.e2, 0.1);
    }

    #[test]
    fn perfect_batch() {
        let m = BinaryMask::from_fn(8, 8, |r, c| r > 2 && c < 5);
        let inner = BinaryMask::from_fn(8, 8, |r, c| r == 4 && c == 2);
        let loc = LocalizationPair {
            pred_inner: &inner,
            gt_inner: &inner,
            pred_outer: &m,
            gt_outer: &m,
        };
        let rec = evaluate_image("x", &m, &m, Some(loc)).unwrap();
        let rep = aggregate(vec![rec.clone(), rec]).unwrap();
        assert_eq!((rep.e1, rep.e2, rep.mdice, rep.mhdis), (0.0, 0.0, Some(1.0), Some(0.0)));
    }

    #[test]
    fn segmentation_only_has_no_localization_aggregates() {
        let m = BinaryMask::full(4, 4);
        let rep = aggregate(vec![evaluate_image("x", &m, &m, None).unwrap()]).unwrap();
        assert_eq!(rep.mdice, None);
        assert_eq!(rep.mhdis, None);
    }

    #[test]
    fn json_round_trip_reaggregates() {
        let rep = aggregate(vec![rec("a", 0.3, 0.9), rec("b", 0.71, 0.123)]).unwrap();
        let back = EvalReport::from_json(&rep.to_json().unwrap()).unwrap();
        let again = aggregate(back.records.clone()).unwrap();
        assert!((again.mdice.unwrap() - rep.mdice.unwrap()).abs() < 1e-12);
        assert_eq!(again, rep);
    }

    #[test]
    fn empty_aggregate_is_an_error() {
        assert!(matches!(aggregate(vec![]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn one_sided_empty_region_scores_worst() {
        let e = BinaryMask::empty(4, 4);
        let f = BinaryMask::full(4, 4);
        assert_eq!(region_hausdorff(&e, &f).unwrap(), 1.0);
        assert_eq!(region_hausdorff(&e, &e).unwrap(), 0.0);
    }
}
