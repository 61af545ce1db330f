use ndarray::{array, Array1};
use proptest::prelude::*;
use tdamp_core::gaussian::{gauss_product, GaussianMsg};
use tdamp_core::model::{LayerParams, NetParams};
use tdamp_core::prior::{
    activity, bias_posterior, group_posterior, layer_extrinsic, layer_posterior,
    log_evidence_ratio, logit, pasp_update, spmp_extrinsic, BGGroup, LayerEvidence, RHO_EPS,
};
use tdamp_oracles as oracle;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-300) || (a - b).abs() <= 1e-300
}

/// Activities agree relatively in whichever of `ρ`, `1 - ρ` is smaller, up
/// to the rounding of `ρ` itself, after applying the activity clamp.
fn rho_close(got: f64, exact: f64, tol: f64) -> bool {
    let clamped = exact.clamp(RHO_EPS, 1.0 - RHO_EPS);
    (got - clamped).abs() <= tol * clamped.min(1.0 - clamped) + 4.0 * f64::EPSILON * clamped
}

fn split(msgs: &[GaussianMsg]) -> (Vec<f64>, Vec<f64>) {
    msgs.iter().map(|m| (m.mean, m.var)).unzip()
}

fn group_strategy() -> impl Strategy<Value = (BGGroup, Vec<GaussianMsg>)> {
    (1usize..=4).prop_flat_map(|n| {
        let element = (
            -2.0f64..2.0,
            0.05f64..3.0,
            -3.0f64..3.0,
            0.05f64..5.0,
            0u8..8,
        );
        (0.01f64..0.99, prop::collection::vec(element, n)).prop_map(|(rho, els)| {
            let g = BGGroup::new(
                rho,
                els.iter().map(|e| e.0).collect(),
                els.iter().map(|e| e.1).collect(),
            );
            let msgs = els
                .iter()
                .map(|e| {
                    if e.4 == 0 {
                        GaussianMsg::FLAT
                    } else {
                        GaussianMsg::new(e.2, e.3)
                    }
                })
                .collect();
            (g, msgs)
        })
    })
}

#[test]
fn uninformative_evidence_keeps_the_prior() {
    let g = BGGroup::new(0.3, vec![0.5, -1.0, 2.0], vec![1.0, 0.2, 3.0]);
    let post = group_posterior(&g, &[GaussianMsg::FLAT; 3]).unwrap();
    assert_eq!(post, g);
    assert_eq!(
        spmp_extrinsic(&g, &[GaussianMsg::FLAT; 3]).unwrap().rho,
        vec![0.3; 3]
    );
}

#[test]
fn certain_groups_reduce_to_gaussian_updates() {
    let g = BGGroup::new(1.0, vec![0.5, -1.0], vec![1.0, 0.2]);
    let msgs = [GaussianMsg::new(1.0, 0.5), GaussianMsg::new(0.0, 2.0)];
    let post = group_posterior(&g, &msgs).unwrap();
    assert_eq!(post.rho, 1.0);
    for m in 0..2 {
        let p = gauss_product(g.element(m), msgs[m]);
        assert_eq!((post.mean[m], post.var[m]), (p.mean, p.var));
    }
}

#[test]
fn bias_posterior_matches_enumeration() {
    for (rho, mu, v, a, va) in [
        (0.4, 0.3, 0.8, -1.2, 0.3),
        (0.9, -2.0, 0.1, 1.0, 4.0),
        (0.05, 0.0, 2.0, 3.0, 0.05),
    ] {
        let post = bias_posterior(&BGGroup::scalar(rho, mu, v), GaussianMsg::new(a, va)).unwrap();
        let o = oracle::bg_group(rho, &[mu], &[v], &[a], &[va], false);
        assert!(rho_close(post.rho, o.rho_post, 1e-10));
        assert!(close(post.mean[0], o.slab[0].0, 1e-10) && close(post.var[0], o.slab[0].1, 1e-10));
    }
    let flat = bias_posterior(&BGGroup::scalar(0.4, 0.3, 0.8), GaussianMsg::FLAT).unwrap();
    assert_eq!(flat, BGGroup::scalar(0.4, 0.3, 0.8));
}

#[test]
fn posterior_as_prior_is_the_identity_at_unit_exponent() {
    let layer = LayerParams {
        w_rho: array![0.2, 0.7],
        w_mean: array![[0.1, -0.4]],
        w_var: array![[0.5, 0.9]],
        b_rho: Array1::ones(1),
        b_mean: array![0.0],
        b_var: array![0.1],
    };
    let net = NetParams {
        layers: vec![layer.clone()],
    };
    let once = pasp_update(&net, 1.0).unwrap();
    assert_eq!(once, net);
    assert_eq!(pasp_update(&once, 1.0).unwrap(), once);
    assert!(pasp_update(&net, 0.5).is_err());
    let rho = layer_extrinsic(&once.layers[0], &LayerEvidence::flat(1, 2));
    assert_eq!(rho.row(0).to_vec(), vec![0.2, 0.7]);
}

#[test]
fn layer_operations_agree_with_groupwise_ones() {
    let p = LayerParams {
        w_rho: array![0.3, 0.8],
        w_mean: array![[0.1, -0.4], [0.6, 0.2], [-0.3, 0.0]],
        w_var: array![[0.5, 0.9], [0.2, 0.4], [1.0, 0.3]],
        b_rho: array![1.0, 0.6, 0.2],
        b_mean: array![0.0, 0.5, -0.5],
        b_var: array![0.1, 0.2, 0.3],
    };
    let mut ev = LayerEvidence::flat(3, 2);
    ev.w_eta = array![[1.0, -0.5], [0.2, 0.0], [2.0, 0.4]];
    ev.w_tau = array![[2.0, 1.0], [0.5, 0.0], [3.0, 0.8]];
    ev.b_eta = array![0.3, -0.1, 0.0];
    ev.b_tau = array![1.0, 0.5, 0.0];
    let post = layer_posterior(&p, &ev);
    let ext = layer_extrinsic(&p, &ev);
    for n in 0..2 {
        let g = p.weight_group(n);
        let msgs: Vec<GaussianMsg> = (0..3).map(|m| ev.weight_msg(m, n)).collect();
        let gp = group_posterior(&g, &msgs).unwrap();
        assert!(close(post.w_rho[n], gp.rho, 1e-14));
        let e = spmp_extrinsic(&g, &msgs).unwrap();
        for m in 0..3 {
            assert!(close(ext[(m, n)], e.rho[m], 1e-14));
            assert!(close(post.w_mean[(m, n)], gp.mean[m], 1e-14));
        }
    }
    for m in 0..3 {
        let b = bias_posterior(&p.bias_group(m), ev.bias_msg(m)).unwrap();
        assert!(close(post.b_rho[m], b.rho, 1e-14) && close(post.b_mean[m], b.mean[0], 1e-14));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matches_two_hypothesis_enumeration((g, msgs) in group_strategy()) {
        let (a, va) = split(&msgs);
        let o = oracle::bg_group(g.rho, &g.mean, &g.var, &a, &va, false);
        let post = group_posterior(&g, &msgs).unwrap();
        let ext = spmp_extrinsic(&g, &msgs).unwrap();
        prop_assert!(rho_close(post.rho, o.rho_post, 1e-8), "rho {} vs {}", post.rho, o.rho_post);
        for m in 0..g.len() {
            prop_assert!(rho_close(ext.rho[m], o.rho_loo[m], 1e-8), "loo {} vs {}", ext.rho[m], o.rho_loo[m]);
            prop_assert!(close(post.mean[m], o.slab[m].0, 1e-8) && close(post.var[m], o.slab[m].1, 1e-8));
            let (mm, mv) = post.marginal(m);
            prop_assert!(close(mm, o.marginal[m].0, 1e-8) && close(mv, o.marginal[m].1, 1e-8));
        }
    }

    #[test]
    fn leave_one_out_folds_back_to_the_posterior((g, msgs) in group_strategy()) {
        let post = group_posterior(&g, &msgs).unwrap();
        let ext = spmp_extrinsic(&g, &msgs).unwrap();
        // a clamped extrinsic has lost the information folding would need
        for m in (0..g.len()).filter(|&m| ext.rho[m] > RHO_EPS && ext.rho[m] < 1.0 - RHO_EPS) {
            let (eta, tau) = msgs[m].natural();
            let folded = activity(ext.rho[m], log_evidence_ratio(g.mean[m], g.var[m], eta, tau));
            // an activity near 0 or 1 pins its log-odds only to eps / min(ρ, 1-ρ)
            let grain = |r: f64| 4.0 * f64::EPSILON / r.min(1.0 - r);
            let tol = 1e-10 + grain(ext.rho[m]) + grain(post.rho);
            prop_assert!((logit(folded) - logit(post.rho)).abs() <= tol, "{folded} vs {}", post.rho);
        }
    }

    #[test]
    fn adversarial_inputs_stay_valid(
        rho in prop_oneof![Just(0.0), Just(1.0), 1e-9f64..1.0],
        els in prop::collection::vec((-1e3f64..1e3, 1e-8f64..1e3, -1e3f64..1e3, 1e-8f64..1e3), 1..=6),
    ) {
        let g = BGGroup::new(rho, els.iter().map(|e| e.0).collect(), els.iter().map(|e| e.1).collect());
        let msgs: Vec<GaussianMsg> = els.iter().map(|e| GaussianMsg::new(e.2, e.3)).collect();
        let post = group_posterior(&g, &msgs).unwrap();
        let ext = spmp_extrinsic(&g, &msgs).unwrap();
        prop_assert!((0.0..=1.0).contains(&post.rho));
        prop_assert!(ext.rho.iter().all(|r| (0.0..=1.0).contains(r)));
        prop_assert!(post.var.iter().all(|v| *v > 0.0 && v.is_finite()));
        prop_assert!(post.mean.iter().all(|m| m.is_finite()));
        if rho == 0.0 || rho == 1.0 {
            prop_assert_eq!(post.rho, rho);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_numerical_integration((g, msgs) in group_strategy()) {
        let (a, va) = split(&msgs);
        let o = oracle::bg_group(g.rho, &g.mean, &g.var, &a, &va, true);
        let post = group_posterior(&g, &msgs).unwrap();
        prop_assert!(rho_close(post.rho, o.rho_post, 1e-8), "rho {} vs {}", post.rho, o.rho_post);
    }
}
