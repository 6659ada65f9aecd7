//! Metric definitions evaluated the slow way: explicit confusion counts,
//! all positive/negative pairs, repeated arg-max selection and set algebra.

use std::collections::BTreeSet;

use rac_core::metrics::{LabelMatrix, MacroAxis, ScoreMatrix};

pub struct Oracle {
    pub macro_f1: f64,
    pub micro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1(scores: &ScoreMatrix, labels: &LabelMatrix, threshold: f64) -> Oracle {
    let (n, m) = (labels.rows(), labels.cols());
    let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
    let mut per_label = Vec::new();
    for j in 0..m {
        let (mut tp, mut fp, mut fneg) = (0, 0, 0);
        for i in 0..n {
            let predicted = scores.get(i, j) >= threshold;
            let actual = labels.get(i, j) == 1;
            match (predicted, actual) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        per_label.push(ratio(2 * tp, 2 * tp + fp + fneg));
        tp_all += tp;
        fp_all += fp;
        fn_all += fneg;
    }
    Oracle {
        macro_f1: per_label.iter().sum::<f64>() / m as f64,
        micro_f1: ratio(2 * tp_all, 2 * tp_all + fp_all + fn_all),
    }
}

/// Pairwise AUC: wins count 1, ties 1/2. `None` without both classes.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut twice_wins = 0usize;
    let (mut pos, mut neg) = (0usize, 0usize);
    for (i, &li) in labels.iter().enumerate() {
        if li == 1 {
            pos += 1;
        } else {
            neg += 1;
        }
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj == 0 {
                if scores[i] > scores[j] {
                    twice_wins += 2;
                } else if scores[i] == scores[j] {
                    twice_wins += 1;
                }
            }
        }
    }
    if pos == 0 || neg == 0 {
        return None;
    }
    Some(twice_wins as f64 / 2.0 / (pos * neg) as f64)
}

pub struct AucOracle {
    pub macro_auc: Option<f64>,
    pub micro_auc: Option<f64>,
    pub skipped: usize,
}

pub fn auc(scores: &ScoreMatrix, labels: &LabelMatrix) -> AucOracle {
    let (n, m) = (labels.rows(), labels.cols());
    let mut per = Vec::new();
    let mut skipped = 0;
    for j in 0..m {
        let s: Vec<f64> = (0..n).map(|i| scores.get(i, j)).collect();
        let l: Vec<u8> = (0..n).map(|i| labels.get(i, j)).collect();
        match pairwise_auc(&s, &l) {
            Some(a) => per.push(a),
            None => skipped += 1,
        }
    }
    AucOracle {
        macro_auc: (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64),
        micro_auc: pairwise_auc(scores.data(), labels.data()),
        skipped,
    }
}

/// Top-`n` by repeatedly taking the highest remaining score, lowest index
/// first among equals.
pub fn precision_at_n(scores: &ScoreMatrix, labels: &LabelMatrix, n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..labels.rows() {
        let mut taken = vec![false; labels.cols()];
        let mut hits = 0;
        for _ in 0..n {
            let mut best: Option<usize> = None;
            for j in 0..labels.cols() {
                if taken[j] {
                    continue;
                }
                if best.is_none_or(|b| scores.get(i, j) > scores.get(i, b)) {
                    best = Some(j);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            hits += labels.get(i, b) as usize;
        }
        total += hits as f64 / n as f64;
    }
    total / labels.rows() as f64
}

pub struct AgreementOracle {
    pub macro_jaccard: f64,
    pub micro_jaccard: f64,
    pub macro_precision: f64,
    pub micro_precision: f64,
    pub macro_recall: f64,
    pub micro_recall: f64,
}

fn set_of(m: &LabelMatrix, axis: MacroAxis, k: usize) -> BTreeSet<usize> {
    match axis {
        MacroAxis::Label => (0..m.rows()).filter(|&i| m.get(i, k) == 1).collect(),
        MacroAxis::Document => (0..m.cols()).filter(|&j| m.get(k, j) == 1).collect(),
    }
}

pub fn set_agreement(a: &LabelMatrix, r: &LabelMatrix, axis: MacroAxis) -> AgreementOracle {
    let groups = match axis {
        MacroAxis::Label => a.cols(),
        MacroAxis::Document => a.rows(),
    };
    let (mut j, mut p, mut rc) = (0.0, 0.0, 0.0);
    for k in 0..groups {
        let (sa, sr) = (set_of(a, axis, k), set_of(r, axis, k));
        let inter = sa.intersection(&sr).count();
        j += ratio(inter, sa.union(&sr).count());
        p += ratio(inter, sa.len());
        rc += ratio(inter, sr.len());
    }
    // micro: pool (document, label) pairs
    let cells = |m: &LabelMatrix| -> BTreeSet<(usize, usize)> {
        (0..m.rows())
            .flat_map(|i| (0..m.cols()).map(move |c| (i, c)))
            .filter(|&(i, c)| m.get(i, c) == 1)
            .collect()
    };
    let (ca, cr) = (cells(a), cells(r));
    let inter = ca.intersection(&cr).count();
    let g = groups as f64;
    AgreementOracle {
        macro_jaccard: j / g,
        micro_jaccard: ratio(inter, ca.union(&cr).count()),
        macro_precision: p / g,
        micro_precision: ratio(inter, ca.len()),
        macro_recall: rc / g,
        micro_recall: ratio(inter, cr.len()),
    }
}

/// Checks every library metric against its oracle with exact equality;
/// returns a description of the first disagreement.
pub fn compare_all(scores: &ScoreMatrix, labels: &LabelMatrix) -> Result<(), String> {
    use rac_core::metrics as m;
    let fail = |what: &str, lib: String, oracle: String| Err(format!("{what}: library {lib} vs oracle {oracle}"));

    let lib = m::f1(scores, labels, m::DEFAULT_THRESHOLD).map_err(|e| e.to_string())?;
    let o = f1(scores, labels, m::DEFAULT_THRESHOLD);
    if lib.macro_f1 != o.macro_f1 || lib.micro_f1 != o.micro_f1 {
        return fail("f1", format!("{lib:?}"), format!("{} {}", o.macro_f1, o.micro_f1));
    }
    let lib = m::auc(scores, labels).map_err(|e| e.to_string())?;
    let o = auc(scores, labels);
    if lib.macro_auc != o.macro_auc || lib.micro_auc != o.micro_auc || lib.skipped_labels != o.skipped {
        return fail("auc", format!("{lib:?}"), format!("{:?} {:?} {}", o.macro_auc, o.micro_auc, o.skipped));
    }
    for n in 1..=labels.cols() {
        let lib = m::precision_at_n(scores, labels, n).map_err(|e| e.to_string())?;
        let o = precision_at_n(scores, labels, n);
        if lib != o {
            return fail(&format!("precision@{n}"), lib.to_string(), o.to_string());
        }
    }
    if scores.is_binary() {
        let a = scores.binarize(0.5);
        for axis in [MacroAxis::Label, MacroAxis::Document] {
            let lib = m::set_agreement(&a, labels, axis).map_err(|e| e.to_string())?;
            let o = set_agreement(&a, labels, axis);
            let same = [
                (lib.macro_jaccard, o.macro_jaccard),
                (lib.micro_jaccard, o.micro_jaccard),
                (lib.macro_precision, o.macro_precision),
                (lib.micro_precision, o.micro_precision),
                (lib.macro_recall, o.macro_recall),
                (lib.micro_recall, o.micro_recall),
            ]
            .iter()
            .all(|(x, y)| x == y);
            if !same {
                return fail(&format!("set_agreement {axis:?}"), format!("{lib:?}"), "differs".into());
            }
            let f = m::f1(scores, labels, 0.5).map_err(|e| e.to_string())?.micro_f1;
            let j = lib.micro_jaccard;
            if (f - 2.0 * j / (1.0 + j)).abs() > 1e-12 {
                return fail("micro-F1 = 2J/(1+J)", f.to_string(), (2.0 * j / (1.0 + j)).to_string());
            }
        }
    }
    Ok(())
}
