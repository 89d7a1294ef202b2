//! Geographic clustering of sensors and fusion of per-cluster estimates.
//!
//! Each cluster runs a local estimator on its own sensors only. The fusion
//! center then keeps, per target, the local estimate with the smallest risk
//! (DS-BLUE) or smallest predictive variance (DEB).

use crate::distortion::{DistortionParams, MixturePrior, PosteriorContext, SensorSummary};
use crate::empirical_bayes::{estimate_map, MapEstimate, MapMethod};
use crate::error::{Error, Result};
use crate::gp::{euclidean, GpModel, Location};
use crate::sblue::SblueBase;

/// Mean Earth radius (IUGG), km.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Haversine distance in km between `[longitude, latitude]` points in degrees.
pub fn great_circle_distance(p: [f64; 2], q: [f64; 2]) -> Result<f64> {
    for c in [p, q] {
        if !(c[1].abs() <= 90.0) || !c[0].is_finite() {
            return Err(Error::invalid(format!("invalid coordinate ({}, {})", c[0], c[1])));
        }
    }
    let (lat1, lat2) = (p[1].to_radians(), q[1].to_radians());
    let dlat = lat2 - lat1;
    let dlon = (q[0] - p[0]).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    Ok(2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin())
}

/// One agglomeration step: clusters `a` and `b` joined at `height`.
/// Leaves are `0..N`; the cluster formed at step `s` gets id `N + s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Merge heights in order; non-decreasing for complete linkage.
    pub fn heights(&self) -> Vec<f64> {
        self.merges.iter().map(|m| m.height).collect()
    }

    /// Partition obtained by stopping after `N − I` merges.
    pub fn cut(&self, clusters: usize) -> Result<ClusterPartition> {
        let n = self.leaves;
        if clusters == 0 || clusters > n {
            return Err(Error::invalid(format!("cluster count {clusters} outside 1..={n}")));
        }
        let mut parent: Vec<usize> = (0..2 * n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (s, m) in self.merges.iter().take(n - clusters).enumerate() {
            let ra = find(&mut parent, m.a);
            let rb = find(&mut parent, m.b);
            parent[ra] = n + s;
            parent[rb] = n + s;
        }
        let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
        Ok(ClusterPartition::from_labels(&roots))
    }
}

/// Complete-linkage agglomerative clustering of a symmetric distance matrix
/// given as a closure. Ties go to the lexicographically smallest pair.
pub fn complete_linkage<D: Fn(usize, usize) -> f64>(n: usize, dist: D) -> Dendrogram {
    let mut d = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = dist(i, j);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    // slot i holds an active cluster with this id and size
    let mut id: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut active: Vec<bool> = vec![true; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..n {
                if active[j] && d[i * n + j] < best.0 {
                    best = (d[i * n + j], i, j);
                }
            }
        }
        let (h, i, j) = best;
        let (ia, ib) = (id[i].min(id[j]), id[i].max(id[j]));
        merges.push(Merge {
            a: ia,
            b: ib,
            height: h,
            size: size[i] + size[j],
        });
        // Lance-Williams update for complete linkage: max of the two distances
        for k in 0..n {
            if active[k] && k != i && k != j {
                let v = d[i * n + k].max(d[j * n + k]);
                d[i * n + k] = v;
                d[k * n + i] = v;
            }
        }
        active[j] = false;
        id[i] = n + step;
        size[i] += size[j];
    }
    Dendrogram { leaves: n, merges }
}

/// Assignment of sensors to clusters `1..=I`. Cluster ids are ordered by the
/// smallest sensor index they contain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterPartition {
    assignment: Vec<usize>,
    clusters: usize,
}

impl ClusterPartition {
    /// Builds a partition from arbitrary labels, renumbering them 1-based in
    /// order of first appearance.
    pub fn from_labels<T: PartialEq + Copy>(labels: &[T]) -> Self {
        let mut seen: Vec<T> = Vec::new();
        let assignment = labels
            .iter()
            .map(|l| match seen.iter().position(|s| s == l) {
                Some(p) => p + 1,
                None => {
                    seen.push(*l);
                    seen.len()
                }
            })
            .collect();
        ClusterPartition {
            assignment,
            clusters: seen.len(),
        }
    }

    /// Single cluster holding every sensor.
    pub fn single(n: usize) -> Self {
        ClusterPartition {
            assignment: vec![1; n],
            clusters: usize::from(n > 0),
        }
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters
    }

    pub fn num_sensors(&self) -> usize {
        self.assignment.len()
    }

    /// Cluster id (1-based) of sensor `n`.
    pub fn cluster_of(&self, n: usize) -> usize {
        self.assignment[n]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Sensor indices of each cluster, in cluster-id order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clusters];
        for (n, &c) in self.assignment.iter().enumerate() {
            out[c - 1].push(n);
        }
        out
    }
}

/// Complete-linkage clustering of `[longitude, latitude]` sites under
/// great-circle distance, cut at `clusters` groups.
pub fn cluster_sensors(lonlat: &[[f64; 2]], clusters: usize) -> Result<ClusterPartition> {
    if clusters == 0 || clusters > lonlat.len() {
        return Err(Error::invalid(format!(
            "cluster count {clusters} outside 1..={}",
            lonlat.len()
        )));
    }
    for p in lonlat {
        great_circle_distance(*p, *p)?;
    }
    let tree = complete_linkage(lonlat.len(), |i, j| {
        great_circle_distance(lonlat[i], lonlat[j]).expect("validated")
    });
    tree.cut(clusters)
}

/// Complete-linkage clustering of planar locations under Euclidean distance.
pub fn cluster_planar(locations: &[Location], clusters: usize) -> Result<ClusterPartition> {
    if clusters == 0 || clusters > locations.len() {
        return Err(Error::invalid(format!(
            "cluster count {clusters} outside 1..={}",
            locations.len()
        )));
    }
    complete_linkage(locations.len(), |i, j| euclidean(&locations[i], &locations[j])).cut(clusters)
}

/// Estimate sent by one cluster head to the fusion center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalEstimate {
    pub cluster: usize,
    pub estimate: f64,
    /// Bayes risk (DS-BLUE) or predictive variance (DEB).
    pub quality: f64,
}

fn select(locals: &[LocalEstimate]) -> Result<&LocalEstimate> {
    if locals.is_empty() {
        return Err(Error::invalid("no local estimates to fuse"));
    }
    if locals.iter().any(|l| !(l.quality >= 0.0) || !l.quality.is_finite()) {
        return Err(Error::invalid("local quality must be finite and non-negative"));
    }
    Ok(locals
        .iter()
        .min_by(|x, y| x.quality.total_cmp(&y.quality).then(x.cluster.cmp(&y.cluster)))
        .unwrap())
}

/// DS-BLUE fusion: the min-risk local estimate and its risk, which bounds
/// the fused risk.
pub fn dsblue_fuse(locals: &[LocalEstimate]) -> Result<(f64, f64)> {
    let best = select(locals)?;
    Ok((best.estimate, best.quality))
}

/// DEB fusion: the local estimate with minimal predictive variance.
pub fn deb_fuse(locals: &[LocalEstimate]) -> Result<f64> {
    Ok(select(locals)?.estimate)
}

fn subset_summaries(summaries: &[SensorSummary], idx: &[usize]) -> Vec<SensorSummary> {
    idx.iter().map(|&i| summaries[i]).collect()
}

/// Distributed S-BLUE over a grid: `(fused estimate, risk bound)` per target.
pub fn distributed_sblue(
    summaries: &[SensorSummary],
    gp: &GpModel,
    prior: &MixturePrior,
    partition: &ClusterPartition,
    targets: &[Location],
) -> Result<Vec<(f64, f64)>> {
    if partition.num_sensors() != summaries.len() {
        return Err(Error::invalid("partition/sensor count mismatch"));
    }
    let locals: Vec<Vec<(f64, f64)>> = partition
        .members()
        .iter()
        .map(|idx| {
            let s = subset_summaries(summaries, idx);
            let locs: Vec<Location> = s.iter().map(|x| x.location).collect();
            let counts: Vec<usize> = s.iter().map(|x| x.count).collect();
            let means: Vec<f64> = s.iter().map(|x| x.mean()).collect();
            SblueBase::new(&locs, gp, &prior.subset(idx), &counts)?.predict_with_risk(targets, &means)
        })
        .collect::<Result<_>>()?;
    (0..targets.len())
        .map(|t| {
            let l: Vec<LocalEstimate> = locals
                .iter()
                .enumerate()
                .map(|(c, v)| LocalEstimate {
                    cluster: c + 1,
                    estimate: v[t].0,
                    quality: v[t].1,
                })
                .collect();
            dsblue_fuse(&l)
        })
        .collect()
}

/// Output of distributed empirical Bayes.
#[derive(Debug, Clone)]
pub struct DistributedEb {
    /// Fused `(estimate, variance)` per target.
    pub predictions: Vec<(f64, f64)>,
    /// Per-cluster MAP estimates stitched into one vector over all sensors.
    pub psi: DistortionParams,
    pub local: Vec<MapEstimate>,
}

/// Distributed empirical Bayes: per-cluster MAP search and prediction,
/// fused by minimum predictive variance.
pub fn distributed_eb(
    summaries: &[SensorSummary],
    gp: &GpModel,
    prior: &MixturePrior,
    partition: &ClusterPartition,
    targets: &[Location],
    method: &MapMethod,
) -> Result<DistributedEb> {
    if partition.num_sensors() != summaries.len() {
        return Err(Error::invalid("partition/sensor count mismatch"));
    }
    let members = partition.members();
    let mut psi = DistortionParams::all_default(summaries.len());
    let mut local = Vec::with_capacity(members.len());
    let mut preds = Vec::with_capacity(members.len());
    for (c, idx) in members.iter().enumerate() {
        let s = subset_summaries(summaries, idx);
        let ctx = PosteriorContext::new(&s, gp)?;
        let sub_prior = prior.subset(idx);
        let method = reseed(method, c as u64);
        let est = estimate_map(&ctx, &sub_prior, &method)?;
        for (k, &n) in idx.iter().enumerate() {
            psi.sensors[n] = est.psi.sensors[k];
        }
        preds.push(ctx.predict_all(targets, &est.psi));
        local.push(est);
    }
    let predictions = (0..targets.len())
        .map(|t| {
            let l: Vec<LocalEstimate> = preds
                .iter()
                .enumerate()
                .map(|(c, p)| LocalEstimate {
                    cluster: c + 1,
                    estimate: p[t].mean,
                    quality: p[t].variance.max(0.0),
                })
                .collect();
            let best = select(&l)?;
            Ok((best.estimate, best.quality))
        })
        .collect::<Result<_>>()?;
    Ok(DistributedEb {
        predictions,
        psi,
        local,
    })
}

fn reseed(method: &MapMethod, cluster: u64) -> MapMethod {
    match method {
        MapMethod::Cem(c) => MapMethod::Cem(crate::empirical_bayes::CemConfig {
            seed: crate::rng::derive_seed(c.seed, cluster),
            ..c.clone()
        }),
        MapMethod::Icm(c) => MapMethod::Icm(crate::empirical_bayes::IcmConfig {
            seed: crate::rng::derive_seed(c.seed, cluster),
            ..c.clone()
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_circumference() {
        let d = great_circle_distance([0.0, 0.0], [90.0, 0.0]).unwrap();
        let expect = std::f64::consts::FRAC_PI_2 * EARTH_RADIUS_KM;
        assert!((d - expect).abs() < 1e-9);
        assert!((d - 10007.5).abs() < 0.1);
        assert_eq!(great_circle_distance([3.0, 4.0], [3.0, 4.0]).unwrap(), 0.0);
        assert!(great_circle_distance([0.0, 91.0], [0.0, 0.0]).is_err());
    }

    #[test]
    fn cut_extremes() {
        let locs: Vec<Location> = (0..6).map(|i| [i as f64 * 0.7 % 1.0, i as f64 * 0.3]).collect();
        let p = cluster_planar(&locs, 6).unwrap();
        assert_eq!(p.assignment(), &[1, 2, 3, 4, 5, 6]);
        let p = cluster_planar(&locs, 1).unwrap();
        assert!(p.assignment().iter().all(|&c| c == 1));
        assert!(cluster_planar(&locs, 7).is_err());
        assert!(cluster_planar(&locs, 0).is_err());
    }

    #[test]
    fn complete_linkage_known_heights() {
        // points on a line: 0, 1, 3, 7
        let x: [f64; 4] = [0.0, 1.0, 3.0, 7.0];
        let t = complete_linkage(4, |i, j| (x[i] - x[j]).abs());
        assert_eq!(t.heights(), vec![1.0, 3.0, 7.0]);
        assert_eq!(t.cut(2).unwrap().assignment(), &[1, 1, 1, 2]);
    }

    #[test]
    fn fusion_rules() {
        let l = |c, e, q| LocalEstimate {
            cluster: c,
            estimate: e,
            quality: q,
        };
        assert_eq!(dsblue_fuse(&[l(1, 5.0, 2.0), l(2, 7.0, 1.0), l(3, 9.0, 3.0)]).unwrap(), (7.0, 1.0));
        assert_eq!(dsblue_fuse(&[l(1, 5.0, 1.0), l(2, 7.0, 1.0)]).unwrap().0, 5.0);
        assert_eq!(dsblue_fuse(&[l(2, 7.0, 1.0), l(1, 5.0, 1.0)]).unwrap().0, 5.0);
        assert_eq!(dsblue_fuse(&[l(1, 4.0, 0.3)]).unwrap(), (4.0, 0.3));
        assert_eq!(deb_fuse(&[l(1, 3.0, 0.5), l(2, 4.0, 0.2)]).unwrap(), 4.0);
        assert_eq!(deb_fuse(&[l(1, 3.0, 0.2), l(2, 4.0, 0.2)]).unwrap(), 3.0);
        assert!(dsblue_fuse(&[]).is_err());
        assert!(deb_fuse(&[l(1, 1.0, f64::NAN)]).is_err());
    }

    #[test]
    fn labels_renumbered_by_first_appearance() {
        let p = ClusterPartition::from_labels(&[9, 4, 9, 7]);
        assert_eq!(p.assignment(), &[1, 2, 1, 3]);
        assert_eq!(p.members(), vec![vec![0, 2], vec![1], vec![3]]);
    }
}
