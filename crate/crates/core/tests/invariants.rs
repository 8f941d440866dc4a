use nfm::data::CensoredSample;
use nfm::frailty::{FrailtyFamily, FrailtySpec};
use nfm::model::NfmModel;
use nfm::nn::{MlpNet, MlpSpec};
use proptest::prelude::*;

fn family(k: u8) -> FrailtyFamily {
    match k % 3 {
        0 => FrailtyFamily::Gamma,
        1 => FrailtyFamily::BoxCox,
        _ => FrailtyFamily::Igg { alpha: 0.5 },
    }
}

fn pf_model(seed: u64, fam: u8, theta: f64, width: usize) -> NfmModel {
    let h = MlpNet::init(MlpSpec::new(1, vec![width]).with_seed(seed)).unwrap();
    let m = MlpNet::init(MlpSpec::new(2, vec![width]).with_seed(seed ^ 0xabcd)).unwrap();
    NfmModel::new_pf(h, m, FrailtySpec::new(family(fam), theta).unwrap(), 4.0, 16).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn curves_start_at_one_and_never_increase(
        seed in any::<u64>(), fam in 0u8..3, theta in 0.0f64..3.0, width in 1usize..12,
        z0 in -2.0f64..2.0, z1 in -2.0f64..2.0,
    ) {
        let model = pf_model(seed, fam, theta, width);
        let grid: Vec<f64> = (0..=40).map(|k| k as f64 * 0.1).collect();
        let curve = model.survival_curve(&[z0, z1], &grid).unwrap();
        prop_assert_eq!(curve.values[0], 1.0);
        prop_assert!(curve.values.windows(2).all(|w| w[1] <= w[0]));
        let mut prev = 0.0;
        for &t in &grid[1..] {
            let lam = model.cum_hazard(t, &[z0, z1]).unwrap();
            prop_assert!(lam >= 0.0 && lam >= prev - 1e-12);
            prev = lam;
        }
    }

    #[test]
    fn fn_embedding_agrees_with_pf(
        seed in any::<u64>(), fam in 0u8..3, theta in 0.0f64..2.0, width in 1usize..10,
        t in 0.0f64..4.0, event in any::<bool>(), z0 in -1.0f64..1.0, z1 in -1.0f64..1.0,
    ) {
        let pf = pf_model(seed, fam, theta, width);
        let fnm = pf.to_fn_embedding().unwrap();
        let batch = [CensoredSample::new(t, event, vec![z0, z1])];
        let (a, b) = (pf.oll(&batch).unwrap(), fnm.oll(&batch).unwrap());
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn oll_is_the_mean_of_single_sample_terms(
        seed in any::<u64>(), times in prop::collection::vec(0.0f64..4.0, 1..8),
    ) {
        let model = pf_model(seed, 0, 0.7, 6);
        let batch: Vec<CensoredSample> =
            times.iter().enumerate().map(|(i, &t)| CensoredSample::new(t, i % 2 == 0, vec![t / 4.0, -0.5])).collect();
        let mean = batch.iter().map(|s| model.sample_terms(s).unwrap().value).sum::<f64>() / batch.len() as f64;
        prop_assert!((model.oll(&batch).unwrap() - mean).abs() <= 1e-12 * mean.abs().max(1.0));
    }
}
