mod common;

use bayes_finetune::evaluation::*;
use bayes_finetune::objectives::{mutual_information, posterior_predictive, PredictionSamples};
use bayes_finetune::{BayesModel, Family, InitSpec, IsotropicPrior, Tensor};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn probs(rows: &[[f64; 2]]) -> Tensor {
    Tensor::new([rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
}

#[test]
fn top1_cases() {
    let p = probs(&[[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]);
    assert_eq!(top1_accuracy(&p, &[0, 1, 0]).unwrap(), 1.0);
    let uniform = Tensor::full([4, 3], 1.0 / 3.0);
    assert_eq!(predictions(&uniform).unwrap(), vec![0; 4]);
    assert!(top1_accuracy(&p, &[0, 1]).is_err());
}

#[test]
fn ece_fixtures() {
    assert_eq!(ece(&probs(&[[1.0, 0.0]]), &[0], 15).unwrap(), 0.0);
    assert!((ece(&probs(&[[0.9, 0.1]]), &[1], 15).unwrap() - 0.9).abs() < 1e-15);

    // confidence 0.8 with 8 of 10 correct, confidence 0.6 with 3 of 5 correct
    let mut rows = vec![[0.8, 0.2]; 10];
    rows.extend(vec![[0.4, 0.6]; 5]);
    let mut labels = vec![0; 8];
    labels.extend([1, 1]);
    labels.extend([1, 1, 1, 0, 0]);
    assert!(ece(&probs(&rows), &labels, 15).unwrap().abs() < 1e-15);

    // two bins: |0.95·2 − 1| + |0.55·2 − 2| over 4 instances
    let rows = [[0.95, 0.05], [0.95, 0.05], [0.55, 0.45], [0.55, 0.45]];
    let got = ece(&probs(&rows), &[0, 1, 0, 0], 15).unwrap();
    let want = ((0.95f64 * 2.0 - 1.0).abs() + (0.55f64 * 2.0 - 2.0).abs()) / 4.0;
    assert!((got - want).abs() < 1e-15);
    // a single bin pools both groups: |(0.95·2 + 0.55·2) − 3| / 4
    let pooled = ece(&probs(&rows), &[0, 1, 0, 0], 1).unwrap();
    assert!((pooled - (3.0f64 - 3.0).abs() / 4.0).abs() < 1e-15);
}

#[test]
fn ap_hand_cases() {
    assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
    let reversed = average_precision(&[0.9, 0.8, 0.1], &[false, false, true]).unwrap();
    assert!((reversed - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(average_precision(&[3.0, 2.0, 1.0, 0.0], &[true, true, false, false]).unwrap(), 1.0);
    assert!(average_precision(&[0.1, 0.2], &[false, false]).is_err());
    assert!(average_precision(&[f64::NAN, 0.2], &[true, false]).is_err());
}

#[test]
fn ap_matches_exhaustive_enumeration_on_small_sets() {
    let mut r = rng(1);
    for n in 2..=12usize {
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..4) as f64 / 4.0).collect();
        for mask in 1..(1u32 << n) - 1 {
            let positive: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
            let got = average_precision(&scores, &positive).unwrap();
            let want = brute_force_ap(&scores, &positive);
            assert!((got - want).abs() < 1e-12, "n {n} mask {mask}: {got} vs {want}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn prop_ap_matches_enumeration(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(2..40);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..8) as f64).collect();
        let mut positive: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        positive[0] = true;
        positive[1] = false;
        let got = average_precision(&scores, &positive).unwrap();
        prop_assert!((got - brute_force_ap(&scores, &positive)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn prop_ece_zero_when_bins_are_calibrated(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        // each group of 10 has confidence c/10 for class 0 with exactly c correct
        for _ in 0..r.random_range(1..5) {
            let c = r.random_range(6..10);
            for i in 0..10 {
                rows.push([c as f64 / 10.0, 1.0 - c as f64 / 10.0]);
                labels.push(usize::from(i >= c));
            }
        }
        prop_assert!(ece(&probs(&rows), &labels, 15).unwrap().abs() < 1e-12);
    }

    #[test]
    fn prop_bucket_membership_is_a_partition(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.random_range(10..60);
        let mi: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64 * 0.1).collect();
        let order = mi_order(&mi);
        let mut sorted = order.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert!(order.windows(2).all(|w| mi[w[0]] <= mi[w[1]]));
        let p = Tensor::from_fn([n, 2], |i| if i % 2 == 0 { 0.7 } else { 0.3 });
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let b = rejection_buckets(&mi, &p, &labels).unwrap();
        prop_assert_eq!(b.len(), 10);
        prop_assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn rejection_bucket_fixtures() {
    let n = 40;
    let p = probs(&vec![[0.7, 0.3]; n]);
    let labels: Vec<usize> = (0..n).map(|i| usize::from(i % 3 == 0)).collect();
    let overall = top1_accuracy(&p, &labels).unwrap();
    let flat = rejection_buckets(&vec![0.2; n], &p, &labels).unwrap();
    assert!(flat.iter().all(|v| (v - overall).abs() < 1e-12));

    let mi: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    let b = rejection_buckets(&mi, &p, &labels).unwrap();
    assert_eq!(b, vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(rejection_buckets(&mi[..5], &p, &labels).is_err());
}

#[test]
fn spearman_cases() {
    let a = [1.0, 2.0, 3.0, 4.0];
    assert!((spearman(&a, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-15);
    assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
    assert!(spearman(&a, &[1.0, 1.0, 1.0, 1.0]).is_nan());
    // ranks [1, 2.5, 2.5, 4] against [1, 2, 3, 4]
    let want = 4.5 / (5.0f64 * 4.5).sqrt();
    assert!((spearman(&[1.0, 2.0, 2.0, 3.0], &a) - want).abs() < 1e-12);
}

#[test]
fn histogram_bins_share_edges() {
    let h = mi_histograms(&[0.0, 0.1, 0.69], &[0.69, 2.0, -1.0], 2, 40);
    assert_eq!(h.len(), 40);
    assert_eq!(h[0].bin_lo, 0.0);
    assert_eq!(h[39].bin_hi, 2f64.ln());
    assert!(h.windows(2).all(|w| w[0].bin_hi == w[1].bin_lo));
    assert_eq!(h.iter().map(|b| b.count_normal).sum::<usize>(), 3);
    assert_eq!(h.iter().map(|b| b.count_ood).sum::<usize>(), 3);
    assert_eq!(h[0].count_ood, 1);
    assert_eq!(h[39].count_ood, 2);
}

fn toy(psi: f64, seed: u64) -> BayesModel {
    let mut r = rng(seed);
    let prior = IsotropicPrior::from_lambda(2e-4, 100).unwrap();
    BayesModel::mlp(2, &[8], 3, prior, &mut r)
        .unwrap()
        .to_variational(Family::Mfg(InitSpec::constant(psi)), &mut r)
        .unwrap()
}

#[test]
fn ensemble_curve_is_prefix_consistent() {
    let model = toy(-0.5, 2);
    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[30, 2], -2.0, 2.0);
    let y: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let curve = ensemble_size_curve(&model, &x, &y, 12, &mut rng(4)).unwrap();
    assert_eq!(curve.len(), 12);
    for s in [1, 5, 12] {
        let (_, mean) = posterior_predictive(&model, &x, s, &mut rng(4)).unwrap();
        assert_eq!(curve[s - 1], top1_accuracy(&mean, &y).unwrap());
    }
    let flat = ensemble_size_curve(&toy(-800.0, 2), &x, &y, 8, &mut r).unwrap();
    assert!(flat.iter().all(|v| *v == flat[0]));
}

#[test]
fn report_csv_schemas() {
    let normal = PredictionSamples::new(
        Tensor::new([2, 10, 2], (0..40).map(|i| if i % 2 == 0 { 0.8 } else { 0.2 }).collect()).unwrap(),
    )
    .unwrap();
    let ood = PredictionSamples::new(
        Tensor::new([2, 4, 2], [[0.9, 0.1].repeat(4), [0.1, 0.9].repeat(4)].concat()).unwrap(),
    )
    .unwrap();
    let labels = vec![0; 10];
    let report = evaluate_predictions(&normal, &labels, &[("noise".into(), ood.clone())]).unwrap();
    assert_eq!(report.top1, 1.0);
    assert_eq!(report.ap_per_ood_source["noise"], 1.0);
    assert_eq!(report.bucket_accuracies.len(), 10);
    assert!((report.mean_mi_ood["noise"] - mutual_information(&ood).mean()).abs() < 1e-15);
    let csv = report.to_csv();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("top1,nll,ece,ap_noise,bucket_0,"));
    assert_eq!(header.split(',').count(), lines.next().unwrap().split(',').count());
    assert!(report.histogram_csv().starts_with("bin_lo,bin_hi,count_normal,count_ood\n"));
    assert_eq!(report.histogram_csv().lines().count(), 41);
}

#[test]
fn variance_study_degenerate_and_single_exemplar_cases() {
    let zero = VarianceStudyConfig { psi_init: InitSpec::constant(-800.0), runs: 20, ..Default::default() };
    let rep = gradient_variance_study(&zero).unwrap();
    assert_eq!(rep.var_standard_mu + rep.var_exemplar_mu + rep.var_standard_psi, 0.0);
    assert!(rep.ratio.is_nan());

    let single = VarianceStudyConfig { batch: 1, runs: 200, ..Default::default() };
    let rep = gradient_variance_study(&single).unwrap();
    assert!((rep.ratio - 1.0).abs() < 1e-9, "ratio {}", rep.ratio);
    assert_eq!(rep.macs_standard, rep.macs_exemplar);
}

#[test]
fn exemplar_variance_is_lower_for_larger_batches() {
    for batch in [8, 32] {
        let rep = gradient_variance_study(&VarianceStudyConfig { batch, ..Default::default() }).unwrap();
        assert!(rep.var_exemplar_mu <= rep.var_standard_mu);
        assert!(rep.var_exemplar_psi <= rep.var_standard_psi);
        assert_eq!(rep.macs_standard, rep.macs_exemplar);
        assert!(rep.macs_standard > 0);
        let csv = rep.to_csv();
        assert!(csv.starts_with("estimator,coordinate_group,variance,macs\n"));
        assert_eq!(csv.lines().count(), 7);
    }
}

#[test]
fn posterior_stats_columns() {
    let mut r = rng(5);
    let prior = IsotropicPrior::from_lambda(2e-4, 100).unwrap();
    let map = BayesModel::mlp(2, &[4], 2, prior, &mut r).unwrap();
    let mfg = map.to_variational(Family::Mfg(InitSpec::default()), &mut r).unwrap();
    let rows = posterior_stats(&mfg).unwrap();
    let sigma: Vec<_> = rows.iter().filter(|row| row.param.ends_with(".sigma")).collect();
    assert_eq!(sigma.len(), 4);
    for row in sigma {
        assert!((row.mean / (-5f64).exp() - 1.0).abs() < 0.01);
    }
    let pse = map
        .to_variational(Family::Pse { candidates: 4, rank: 1, noise_std: 0.0 }, &mut r)
        .unwrap();
    let rows = posterior_stats(&pse).unwrap();
    for row in rows.iter().filter(|row| row.param.ends_with(".perturbation")) {
        assert_eq!((row.mean, row.std, row.min, row.max), (1.0, 0.0, 1.0, 1.0));
    }
    let csv = posterior_stats_csv(&rows);
    assert!(csv.starts_with("layer,param,mean,std,min,max\n"));
    assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 6));
}
