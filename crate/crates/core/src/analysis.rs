//! Post-hoc analyses over graphs and trained models: homophily densities,
//! per-community homophily, gate-weight breakdowns by homophily bucket, and
//! per-bucket accuracy comparisons. Everything is a deterministic function of
//! its inputs and serializes to CSV.

use std::io::Write;

use crate::graph::{graph_homophily, Graph, LabelVector};
use crate::matrix::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DensityRow {
    pub lo: f64,
    pub hi: f64,
    pub center: f64,
    /// Normalized histogram density (integrates to 1).
    pub histogram: f64,
    /// Gaussian-kernel density, renormalized to integrate to 1 on [0, 1].
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityTable {
    pub rows: Vec<DensityRow>,
    /// Zero-degree nodes excluded from the estimate.
    pub skipped_nodes: usize,
}

impl DensityTable {
    /// Bin center with the largest smoothed density.
    pub fn mode(&self) -> f64 {
        self.rows
            .iter()
            .max_by(|a, b| a.density.partial_cmp(&b.density).unwrap())
            .map(|r| r.center)
            .unwrap_or(f64::NAN)
    }
}

/// Histogram + Gaussian KDE of the per-node homophily values. Bandwidth is
/// Silverman's rule of thumb on the finite values clipped to [0, 1].
pub fn homophily_density(g: &Graph, y: &LabelVector, bins: usize) -> Result<DensityTable> {
    if bins < 2 {
        return Err(Error::invalid("need at least 2 bins"));
    }
    let per_node = crate::graph::node_homophily(g, y);
    let values: Vec<f64> = per_node
        .iter()
        .copied()
        .filter(|h| h.is_finite())
        .map(|h| h.clamp(0.0, 1.0))
        .collect();
    let skipped_nodes = per_node.len() - values.len();
    if values.is_empty() {
        return Err(Error::invalid("no nodes with neighbors"));
    }
    let m = values.len() as f64;
    let width = 1.0 / bins as f64;

    let mut counts = vec![0usize; bins];
    for &h in &values {
        let b = ((h * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }

    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    let std = var.sqrt();
    let mut sorted = values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| sorted[((q * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1)];
    let iqr = quantile(0.75) - quantile(0.25);
    let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    let mut bw = 0.9 * spread * m.powf(-0.2);
    // Keep the kernel resolvable on the bin grid; a degenerate sample (all
    // values equal) would otherwise zero out every bin center.
    if !(bw > width / 2.0) {
        bw = width / 2.0;
    }

    let mut rows: Vec<DensityRow> = (0..bins)
        .map(|b| {
            let lo = b as f64 * width;
            let hi = lo + width;
            let center = (lo + hi) / 2.0;
            let kde = values
                .iter()
                .map(|&h| {
                    let z = (center - h) / bw;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                / (m * bw * (2.0 * std::f64::consts::PI).sqrt());
            DensityRow {
                lo,
                hi,
                center,
                histogram: counts[b] as f64 / (m * width),
                density: kde,
            }
        })
        .collect();
    // The kernel leaks mass outside [0, 1]; renormalize so the table
    // integrates to 1 exactly.
    let total: f64 = rows.iter().map(|r| r.density * width).sum();
    for r in &mut rows {
        r.density /= total;
    }
    Ok(DensityTable {
        rows,
        skipped_nodes,
    })
}

pub fn write_density_csv(table: &DensityTable, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "bin_lo,bin_hi,center,histogram,density")?;
    for r in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.lo, r.hi, r.center, r.histogram, r.density
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommunityRow {
    pub community: usize,
    pub size: usize,
    /// Homophily of the induced subgraph (cross-community edges ignored).
    pub homophily: f64,
}

/// Per-community homophily for the largest `top_n` communities (all of them
/// when fewer exist), ordered by size descending.
pub fn community_homophily(
    g: &Graph,
    y: &LabelVector,
    membership: &[usize],
    top_n: usize,
) -> Result<Vec<CommunityRow>> {
    if membership.len() != g.num_nodes() {
        return Err(Error::invalid("membership length mismatch"));
    }
    let num_comms = membership.iter().copied().max().map_or(0, |c| c + 1);
    let mut sizes = vec![0usize; num_comms];
    for &c in membership {
        sizes[c] += 1;
    }
    let mut order: Vec<usize> = (0..num_comms).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    order.truncate(top_n);

    let labels = y.labels();
    let mut rows = Vec::with_capacity(order.len());
    for &c in &order {
        // Induced-subgraph homophily: per-node same-label fraction among
        // neighbors inside the community.
        let mut per_node = Vec::new();
        for v in 0..g.num_nodes() {
            if membership[v] != c {
                continue;
            }
            let mut intra = 0usize;
            let mut same = 0usize;
            for &u in g.neighbors(v) {
                if membership[u] == c {
                    intra += 1;
                    if labels[u] == labels[v] {
                        same += 1;
                    }
                }
            }
            per_node.push(if intra == 0 {
                f64::NAN
            } else {
                same as f64 / intra as f64
            });
        }
        rows.push(CommunityRow {
            community: c,
            size: sizes[c],
            homophily: graph_homophily(&per_node),
        });
    }
    Ok(rows)
}

pub fn write_communities_csv(rows: &[CommunityRow], out: &mut dyn Write) -> Result<()> {
    writeln!(out, "community,size,homophily")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.community, r.size, r.homophily)?;
    }
    Ok(())
}

/// Spearman rank correlation with average ranks on ties; 0 when either side
/// is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return 0.0;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketWeightRow {
    pub bucket: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean gate weight per expert over the bucket.
    pub mean_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketWeights {
    pub rows: Vec<BucketWeightRow>,
    /// Spearman correlation of bucket index vs. mean weight, per expert.
    pub spearman_per_expert: Vec<f64>,
    /// Buckets that contained no nodes (omitted from `rows`).
    pub empty_buckets: Vec<usize>,
    /// Nodes without a finite homophily value (degree 0).
    pub skipped_nodes: usize,
}

/// Mean gate weight per expert over equal-width homophily buckets.
pub fn gate_weight_by_homophily(
    per_node_homophily: &[f64],
    weights: &Matrix,
    buckets: usize,
) -> Result<BucketWeights> {
    if buckets < 2 {
        return Err(Error::invalid("need at least 2 buckets"));
    }
    if per_node_homophily.len() != weights.rows() {
        return Err(Error::invalid("homophily/weight length mismatch"));
    }
    let m = weights.cols();
    let width = 1.0 / buckets as f64;
    let mut sums = vec![vec![0.0; m]; buckets];
    let mut counts = vec![0usize; buckets];
    let mut skipped = 0usize;
    for (i, &h) in per_node_homophily.iter().enumerate() {
        if !h.is_finite() {
            skipped += 1;
            continue;
        }
        let b = ((h.clamp(0.0, 1.0) * buckets as f64) as usize).min(buckets - 1);
        counts[b] += 1;
        for (acc, &w) in sums[b].iter_mut().zip(weights.row(i)) {
            *acc += w;
        }
    }
    let mut rows = Vec::new();
    let mut empty = Vec::new();
    for b in 0..buckets {
        if counts[b] == 0 {
            empty.push(b);
            continue;
        }
        rows.push(BucketWeightRow {
            bucket: b,
            lo: b as f64 * width,
            hi: (b + 1) as f64 * width,
            count: counts[b],
            mean_weights: sums[b].iter().map(|s| s / counts[b] as f64).collect(),
        });
    }
    if rows.is_empty() {
        return Err(Error::invalid("no nodes with finite homophily"));
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.bucket as f64).collect();
    let spearman_per_expert = (0..m)
        .map(|o| {
            let ys: Vec<f64> = rows.iter().map(|r| r.mean_weights[o]).collect();
            spearman(&xs, &ys)
        })
        .collect();
    Ok(BucketWeights {
        rows,
        spearman_per_expert,
        empty_buckets: empty,
        skipped_nodes: skipped,
    })
}

pub fn write_bucket_weights_csv(bw: &BucketWeights, out: &mut dyn Write) -> Result<()> {
    let m = bw.rows.first().map_or(0, |r| r.mean_weights.len());
    write!(out, "bucket,lo,hi,count")?;
    for o in 0..m {
        write!(out, ",mean_w{o}")?;
    }
    writeln!(out)?;
    for r in &bw.rows {
        write!(out, "{},{},{},{}", r.bucket, r.lo, r.hi, r.count)?;
        for w in &r.mean_weights {
            write!(out, ",{w}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyBucketRow {
    pub bucket: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub accuracy_a: f64,
    pub accuracy_b: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyBuckets {
    pub rows: Vec<AccuracyBucketRow>,
    pub overall_a: f64,
    pub overall_b: Option<f64>,
    pub skipped_nodes: usize,
}

/// Per-bucket accuracy for one model (and optionally a second, with deltas).
/// `idx[i]` names the node scored by `correct_a[i]` / `correct_b[i]`.
pub fn accuracy_by_homophily(
    per_node_homophily: &[f64],
    idx: &[usize],
    correct_a: &[bool],
    correct_b: Option<&[bool]>,
    buckets: usize,
) -> Result<AccuracyBuckets> {
    if buckets < 2 {
        return Err(Error::invalid("need at least 2 buckets"));
    }
    if idx.len() != correct_a.len() {
        return Err(Error::invalid("index/flag length mismatch"));
    }
    if let Some(b) = correct_b {
        if b.len() != idx.len() {
            return Err(Error::invalid("index/flag length mismatch"));
        }
    }
    let width = 1.0 / buckets as f64;
    let mut counts = vec![0usize; buckets];
    let mut hits_a = vec![0usize; buckets];
    let mut hits_b = vec![0usize; buckets];
    let mut skipped = 0usize;
    for (pos, &node) in idx.iter().enumerate() {
        let h = per_node_homophily[node];
        if !h.is_finite() {
            skipped += 1;
            continue;
        }
        let b = ((h.clamp(0.0, 1.0) * buckets as f64) as usize).min(buckets - 1);
        counts[b] += 1;
        if correct_a[pos] {
            hits_a[b] += 1;
        }
        if let Some(cb) = correct_b {
            if cb[pos] {
                hits_b[b] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("no scored nodes with finite homophily"));
    }
    let mut rows = Vec::new();
    for b in 0..buckets {
        if counts[b] == 0 {
            continue;
        }
        let acc_a = hits_a[b] as f64 / counts[b] as f64;
        let acc_b = correct_b.map(|_| hits_b[b] as f64 / counts[b] as f64);
        rows.push(AccuracyBucketRow {
            bucket: b,
            lo: b as f64 * width,
            hi: (b + 1) as f64 * width,
            count: counts[b],
            accuracy_a: acc_a,
            accuracy_b: acc_b,
            delta: acc_b.map(|x| acc_a - x),
        });
    }
    let overall_a = hits_a.iter().sum::<usize>() as f64 / total as f64;
    let overall_b = correct_b.map(|_| hits_b.iter().sum::<usize>() as f64 / total as f64);
    Ok(AccuracyBuckets {
        rows,
        overall_a,
        overall_b,
        skipped_nodes: skipped,
    })
}

pub fn write_accuracy_buckets_csv(ab: &AccuracyBuckets, out: &mut dyn Write) -> Result<()> {
    let two = ab.overall_b.is_some();
    if two {
        writeln!(out, "bucket,lo,hi,count,accuracy_a,accuracy_b,delta")?;
    } else {
        writeln!(out, "bucket,lo,hi,count,accuracy")?;
    }
    for r in &ab.rows {
        if two {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.bucket,
                r.lo,
                r.hi,
                r.count,
                r.accuracy_a,
                r.accuracy_b.unwrap(),
                r.delta.unwrap()
            )?;
        } else {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.bucket, r.lo, r.hi, r.count, r.accuracy_a
            )?;
        }
    }
    Ok(())
}
