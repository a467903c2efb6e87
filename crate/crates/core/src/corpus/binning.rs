use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Assignment of classes to frequency bins, head (0) to tail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBinning {
    /// Bin index for every class id.
    pub bin_of: Vec<usize>,
    /// Positive-occurrence mass per bin.
    pub mass: Vec<usize>,
    /// Number of classes per bin.
    pub class_count: Vec<usize>,
}

impl ClassBinning {
    pub fn n_bins(&self) -> usize {
        self.mass.len()
    }

    /// Class ids of `bin` in ascending id order.
    pub fn classes_in(&self, bin: usize) -> Vec<usize> {
        (0..self.bin_of.len()).filter(|&c| self.bin_of[c] == bin).collect()
    }
}

/// Splits classes into `n_bins` groups holding roughly equal numbers of
/// positive occurrences.
///
/// Classes are visited by descending count (ties by class id) and appended
/// to the current bin; bin `b` closes once the running total over all
/// visited classes reaches `(b + 1) * total / n_bins`. A bin also closes
/// early when exactly one unvisited class remains per unopened bin, so no
/// bin is left empty. The last bin takes everything that remains,
/// including classes without occurrences.
///
/// The greedy fill can overshoot by up to one class per boundary, which
/// may leave adjacent bins further apart than the largest class count.
/// Such pairs are repaired by shifting the boundary class into the lighter
/// bin; every shift strictly lowers the sum of squared bin masses, so the
/// repair terminates with every adjacent difference at most the largest
/// class count.
pub fn bin_classes(counts: &[usize], n_bins: usize) -> Result<ClassBinning> {
    if n_bins == 0 {
        return Err(Error::Config("need at least one bin".into()));
    }
    let mut order: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    if order.len() < n_bins {
        return Err(Error::Data(format!(
            "{} classes with occurrences, need at least {n_bins}",
            order.len()
        )));
    }
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let sorted: Vec<usize> = order.iter().map(|&c| counts[c]).collect();

    let mut ends = greedy_ends(&sorted, n_bins);
    repair(&sorted, &mut ends);

    let last = n_bins - 1;
    let mut bin_of = vec![last; counts.len()];
    let mut mass = vec![0; n_bins];
    let mut class_count = vec![0; n_bins];
    let mut start = 0;
    for (bin, &end) in ends.iter().enumerate() {
        for &c in &order[start..end] {
            bin_of[c] = bin;
        }
        mass[bin] = sorted[start..end].iter().sum();
        class_count[bin] = end - start;
        start = end;
    }
    class_count[last] += counts.len() - order.len();
    Ok(ClassBinning {
        bin_of,
        mass,
        class_count,
    })
}

/// Exclusive end position of every bin in the sorted order.
fn greedy_ends(sorted: &[usize], n_bins: usize) -> Vec<usize> {
    let total: usize = sorted.iter().sum();
    let last = n_bins - 1;
    let mut ends = Vec::with_capacity(n_bins);
    let mut running = 0;
    for (pos, &count) in sorted.iter().enumerate() {
        running += count;
        let bin = ends.len();
        if bin < last {
            let reached = running * n_bins >= total * (bin + 1);
            let remaining = sorted.len() - pos - 1;
            if reached || remaining == last - bin {
                ends.push(pos + 1);
            }
        }
    }
    ends.push(sorted.len());
    ends
}

fn repair(sorted: &[usize], ends: &mut [usize]) {
    let max = sorted.first().copied().unwrap_or(0);
    let bin_mass = |ends: &[usize], b: usize| -> usize {
        let start = if b == 0 { 0 } else { ends[b - 1] };
        sorted[start..ends[b]].iter().sum()
    };
    loop {
        let mut moved = false;
        for b in 0..ends.len() - 1 {
            let (left, right) = (bin_mass(ends, b), bin_mass(ends, b + 1));
            if left > right + max {
                // last class of bin b moves right
                ends[b] -= 1;
                moved = true;
            } else if right > left + max {
                ends[b] += 1;
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
}
