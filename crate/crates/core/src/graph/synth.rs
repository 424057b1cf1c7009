//! Synthetic attributed graphs with planted group bias.
//!
//! Every node gets a binary group `s`, a latent merit score `z ~ N(0, 1)`
//! and a label `y = [z + offset * (2s - 1) > 0]`. Attribute columns come in
//! two kinds: signal columns `z + noise / signal` and proxy columns
//! `rho * (2s - 1) + sqrt(1 - rho^2) * noise`. The group itself is the
//! last attribute column (`sens`). Edges follow a block model whose pair
//! probability is `p * w_group * w_label`, with
//! `w_group = 2h` inside a group and `2(1 - h)` across, and `w_label =
//! 1 +/- label_homophily`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Graph, GraphError, SensitiveAttribute, SplitConfig};
use crate::tensor::Matrix;

pub const SENSITIVE_NAME: &str = "sens";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_nodes: usize,
    /// Non-sensitive attribute columns (signal + proxy).
    pub num_features: usize,
    /// How many of those columns are correlated with the group.
    pub num_proxies: usize,
    /// Expected fraction of intra-group edges, in `[0.5, 1)`.
    pub homophily: f64,
    /// Correlation between proxy columns and the group, in `[0, 1]`.
    pub proxy_correlation: f64,
    /// Signal-to-noise ratio of the signal columns.
    pub label_signal: f64,
    /// Shift of the latent score between groups.
    pub group_offset: f64,
    /// Relative boost of same-label edges, in `[0, 1)`.
    pub label_homophily: f64,
    /// Expected node degree.
    pub avg_degree: f64,
    /// Probability of belonging to group 1.
    pub group_balance: f64,
    pub splits: SplitConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_nodes: 2000,
            num_features: 8,
            num_proxies: 2,
            homophily: 0.9,
            proxy_correlation: 0.6,
            label_signal: 1.0,
            group_offset: 0.5,
            label_homophily: 0.5,
            avg_degree: 10.0,
            group_balance: 0.5,
            splits: SplitConfig::default(),
        }
    }
}

impl SynthConfig {
    /// Base pair probability `p`.
    pub fn base_probability(&self) -> f64 {
        self.avg_degree / (self.num_nodes.max(2) - 1) as f64
    }

    /// Pair probability for two same-group nodes with equal labels.
    pub fn intra_group_probability(&self) -> f64 {
        self.base_probability() * 2.0 * self.homophily
    }

    /// Pair probability for two nodes in different groups with equal labels.
    pub fn inter_group_probability(&self) -> f64 {
        self.base_probability() * 2.0 * (1.0 - self.homophily)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: String| Err(GraphError::InvalidParameter(m));
        if self.num_nodes < 2 {
            return bad("num_nodes must be at least 2".into());
        }
        if self.num_proxies > self.num_features {
            return bad("num_proxies exceeds num_features".into());
        }
        if !(0.5..1.0).contains(&self.homophily) {
            return bad(format!("homophily {} outside [0.5, 1)", self.homophily));
        }
        if !(0.0..=1.0).contains(&self.proxy_correlation) {
            return bad(format!("proxy_correlation {} outside [0, 1]", self.proxy_correlation));
        }
        if !(0.0..1.0).contains(&self.label_homophily) {
            return bad(format!("label_homophily {} outside [0, 1)", self.label_homophily));
        }
        if !(self.group_balance > 0.0 && self.group_balance < 1.0) {
            return bad(format!("group_balance {} outside (0, 1)", self.group_balance));
        }
        if !(self.label_signal > 0.0) || !self.group_offset.is_finite() {
            return bad("label_signal must be positive and group_offset finite".into());
        }
        let p_max = self.intra_group_probability() * (1.0 + self.label_homophily);
        if !(self.avg_degree >= 0.0) || p_max > 1.0 {
            return bad(format!("edge probability {p_max} exceeds 1"));
        }
        self.splits.validate()
    }
}

/// Generates a graph from `params`; the same `(params, seed)` always
/// yields the same graph. Splits are drawn with `params.splits`.
pub fn generate_synthetic(params: &SynthConfig, seed: u64) -> Result<Graph, GraphError> {
    params.validate()?;
    let n = params.num_nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    // Draw per-node quantities in a fixed order so the stream is stable.
    let mut group = vec![0u8; n];
    let mut latent = vec![0.0; n];
    let mut rng_b = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for i in 0..n {
        group[i] = u8::from(rng_b.random::<f64>() < params.group_balance);
        latent[i] = normal();
    }
    let labels: Vec<Option<u8>> = (0..n)
        .map(|i| {
            let shift = params.group_offset * (2.0 * group[i] as f64 - 1.0);
            Some(u8::from(latent[i] + shift > 0.0))
        })
        .collect();

    let d = params.num_features + 1;
    let rho = params.proxy_correlation;
    let resid = (1.0 - rho * rho).sqrt();
    let noise = 1.0 / params.label_signal;
    let mut attributes = Matrix::zeros(n, d);
    for i in 0..n {
        let sign = 2.0 * group[i] as f64 - 1.0;
        for c in 0..params.num_features {
            let v = if c < params.num_proxies {
                rho * sign + resid * normal()
            } else {
                latent[i] + noise * normal()
            };
            attributes.set(i, c, v);
        }
        attributes.set(i, d - 1, group[i] as f64);
    }

    let p = params.base_probability();
    let weight = |i: usize, j: usize| {
        let wg = if group[i] == group[j] {
            2.0 * params.homophily
        } else {
            2.0 * (1.0 - params.homophily)
        };
        let wy = if labels[i] == labels[j] {
            1.0 + params.label_homophily
        } else {
            1.0 - params.label_homophily
        };
        p * wg * wy
    };
    let mut edge_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5851_f42d_4c95_7f2d));
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if edge_rng.random::<f64>() < weight(i, j) {
                edges.push((i, j));
            }
        }
    }

    let mut names: Vec<String> = (0..params.num_features)
        .map(|c| {
            if c < params.num_proxies {
                format!("proxy{c}")
            } else {
                format!("signal{}", c - params.num_proxies)
            }
        })
        .collect();
    names.push(SENSITIVE_NAME.to_string());
    let splits = params.splits.draw(&labels)?;
    Graph::from_edges(
        n,
        &edges,
        attributes,
        names,
        vec![SensitiveAttribute {
            name: SENSITIVE_NAME.to_string(),
            values: group,
            column: Some(d - 1),
        }],
        labels,
        splits,
    )
}

/// Fraction of edges whose endpoints share the value of `attribute`.
pub fn intra_group_edge_fraction(g: &Graph, attribute: &str) -> Result<f64, GraphError> {
    let s = &g.sensitive(attribute)?.values;
    let edges = g.edge_list();
    if edges.is_empty() {
        return Ok(0.0);
    }
    let intra = edges.iter().filter(|(u, v)| s[*u] == s[*v]).count();
    Ok(intra as f64 / edges.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(h: f64, rho: f64) -> SynthConfig {
        SynthConfig {
            num_nodes: 400,
            homophily: h,
            proxy_correlation: rho,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn strong_homophily_gives_mostly_intra_edges() {
        let g = generate_synthetic(&SynthConfig::default(), 1).unwrap();
        assert_eq!(g.num_nodes(), 2000);
        assert!(intra_group_edge_fraction(&g, SENSITIVE_NAME).unwrap() > 0.8);
    }

    #[test]
    fn no_planted_bias_is_balanced() {
        let g = generate_synthetic(&small(0.5, 0.0), 3).unwrap();
        let f = intra_group_edge_fraction(&g, SENSITIVE_NAME).unwrap();
        assert!((f - 0.5).abs() < 0.06, "fraction {f}");
    }

    #[test]
    fn same_seed_same_graph() {
        let a = generate_synthetic(&small(0.8, 0.5), 11).unwrap();
        let b = generate_synthetic(&small(0.8, 0.5), 11).unwrap();
        assert_eq!(a.edge_list(), b.edge_list());
        assert!(a.attributes().bit_eq(b.attributes()));
        assert_eq!(a.splits(), b.splits());
        let c = generate_synthetic(&small(0.8, 0.5), 12).unwrap();
        assert_ne!(a.edge_list(), c.edge_list());
    }

    #[test]
    fn proxies_correlate_with_group() {
        let g = generate_synthetic(&small(0.7, 0.9), 5).unwrap();
        let s = &g.sensitive(SENSITIVE_NAME).unwrap().values;
        let n = g.num_nodes() as f64;
        let mean_for = |grp: u8| {
            (0..g.num_nodes()).filter(|&i| s[i] == grp).map(|i| g.attributes().get(i, 0)).sum::<f64>()
                / s.iter().filter(|&&v| v == grp).count() as f64
        };
        assert!(mean_for(1) - mean_for(0) > 1.5, "n={n}");
    }

    #[test]
    fn invalid_parameters_rejected() {
        for cfg in [
            SynthConfig { homophily: 1.0, ..SynthConfig::default() },
            SynthConfig { homophily: 0.4, ..SynthConfig::default() },
            SynthConfig { proxy_correlation: 1.5, ..SynthConfig::default() },
            SynthConfig { num_nodes: 20, avg_degree: 15.0, ..SynthConfig::default() },
            SynthConfig { num_proxies: 9, ..SynthConfig::default() },
        ] {
            assert!(generate_synthetic(&cfg, 0).is_err(), "{cfg:?}");
        }
    }
}
