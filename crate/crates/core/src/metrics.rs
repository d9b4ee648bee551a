//! Class-wise IoU, mIoU and foreground/background IoU over episodes.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// How per-class IoU is formed from a class's episodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IouMode {
    /// Sum intersections and unions over the episodes, then divide.
    #[default]
    Pooled,
    /// Mean of per-episode IoU values.
    PerEpisode,
}

impl std::str::FromStr for IouMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(IouMode::Pooled),
            "per_episode" => Ok(IouMode::PerEpisode),
            _ => Err(Error::Config(format!("iou_mode must be `pooled` or `per_episode`, got `{s}`"))),
        }
    }
}

/// Intersection and union pixel counts of one binary mask pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    /// Counts for the value `target` (1 for foreground, 0 for background).
    pub fn of(pred: &[u8], gt: &[u8], target: u8) -> Self {
        debug_assert_eq!(pred.len(), gt.len());
        let mut o = Overlap::default();
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p == target, g == target);
            o.intersection += (p && g) as u64;
            o.union += (p || g) as u64;
        }
        o
    }

    /// IoU, with an empty union scoring 1 (both masks empty).
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }

    fn add(&mut self, other: Overlap) {
        self.intersection += other.intersection;
        self.union += other.union;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassIou {
    pub per_class: BTreeMap<u32, f64>,
    pub miou: f64,
}

fn check_lengths(preds: usize, gts: usize, classes: Option<usize>) -> Result<()> {
    if preds != gts || classes.is_some_and(|c| c != preds) {
        return Err(Error::invalid(
            "miou",
            format!("misaligned inputs: {preds} predictions, {gts} ground truths, {classes:?} class ids"),
        ));
    }
    Ok(())
}

/// Per-class IoU over `fold_classes` and their unweighted mean. Classes in
/// `fold_classes` that no episode exercised are left out of the mean.
pub fn miou(
    preds: &[Vec<u8>],
    gts: &[Vec<u8>],
    class_ids: &[u32],
    fold_classes: &[u32],
    mode: IouMode,
) -> Result<ClassIou> {
    check_lengths(preds.len(), gts.len(), Some(class_ids.len()))?;
    let mut pooled: BTreeMap<u32, (Overlap, f64, usize)> = BTreeMap::new();
    for ((p, g), &c) in preds.iter().zip(gts).zip(class_ids) {
        if !fold_classes.contains(&c) {
            return Err(Error::invalid("miou", format!("class {c} is not in the evaluated fold")));
        }
        let o = Overlap::of(p, g, 1);
        let slot = pooled.entry(c).or_default();
        slot.0.add(o);
        slot.1 += o.iou();
        slot.2 += 1;
    }
    let per_class: BTreeMap<u32, f64> = pooled
        .into_iter()
        .map(|(c, (o, sum, n))| {
            let iou = match mode {
                IouMode::Pooled => o.iou(),
                IouMode::PerEpisode => sum / n as f64,
            };
            (c, iou)
        })
        .collect();
    let miou = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(ClassIou { per_class, miou })
}

/// Mean of pooled foreground and background IoU over all episodes.
pub fn fbiou(preds: &[Vec<u8>], gts: &[Vec<u8>]) -> Result<f64> {
    check_lengths(preds.len(), gts.len(), None)?;
    let mut fg = Overlap::default();
    let mut bg = Overlap::default();
    for (p, g) in preds.iter().zip(gts) {
        fg.add(Overlap::of(p, g, 1));
        bg.add(Overlap::of(p, g, 0));
    }
    Ok(0.5 * (fg.iou() + bg.iou()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: [[u8; 3]; 3]) -> Vec<u8> {
        rows.concat()
    }

    #[test]
    fn hand_counted_three_by_three() {
        let pred = grid([[1, 1, 0], [1, 1, 0], [0, 0, 0]]);
        let gt = grid([[1, 1, 1], [1, 0, 0], [1, 1, 0]]);
        let r = miou(&[pred], &[gt], &[2], &[2], IouMode::Pooled).unwrap();
        assert_eq!(r.per_class[&2], 3.0 / 7.0);
    }

    #[test]
    fn pooled_and_per_episode_differ() {
        let a_pred = grid([[1, 0, 0], [0, 0, 0], [0, 0, 0]]);
        let a_gt = a_pred.clone();
        let b_pred = grid([[1, 1, 1], [1, 1, 1], [0, 0, 0]]);
        let b_gt = grid([[1, 1, 1], [0, 0, 0], [0, 0, 0]]);
        let preds = [a_pred, b_pred];
        let gts = [a_gt, b_gt];
        let pooled = miou(&preds, &gts, &[0, 0], &[0], IouMode::Pooled).unwrap();
        let per = miou(&preds, &gts, &[0, 0], &[0], IouMode::PerEpisode).unwrap();
        assert_eq!(pooled.miou, 4.0 / 7.0);
        assert_eq!(per.miou, 0.75);
    }

    #[test]
    fn unknown_class_and_misalignment_are_errors() {
        let m = vec![0u8; 9];
        assert!(miou(&[m.clone()], &[m.clone()], &[5], &[0, 1], IouMode::Pooled).is_err());
        assert!(miou(&[m.clone()], &[], &[0], &[0], IouMode::Pooled).is_err());
        assert!(fbiou(&[m.clone(), m.clone()], &[m]).is_err());
    }

    #[test]
    fn fbiou_closed_forms() {
        let gt = vec![1, 1, 0, 0];
        assert_eq!(fbiou(&[gt.clone()], &[gt.clone()]).unwrap(), 1.0);
        // all background on half-foreground: IoU_f = 0, IoU_b = 2/4
        assert_eq!(fbiou(&[vec![0; 4]], &[gt.clone()]).unwrap(), 0.25);
        let pred = vec![1, 0, 1, 0];
        let flip = |m: &Vec<u8>| m.iter().map(|&v| 1 - v).collect::<Vec<u8>>();
        assert_eq!(
            fbiou(&[pred.clone()], &[gt.clone()]).unwrap(),
            fbiou(&[flip(&pred)], &[flip(&gt)]).unwrap()
        );
    }
}
