use hyspark::oracle::relative_error;
use hyspark::verify::{PipelineFixture, GRAD_FLOOR};

#[test]
fn pipeline_gradient_converges_with_smaller_step() {
    let fx = PipelineFixture::new(3).unwrap();
    let coords = fx.sample_coords(60, 3);
    let analytic = fx.gradient().unwrap();
    let disagreement = |h: f64| {
        let numeric = hyspark::oracle::finite_diff_params(|p| fx.loss(p), &fx.params, &coords, h).unwrap();
        coords
            .iter()
            .zip(numeric)
            .map(|((name, i), n)| (analytic.require(name).unwrap().data()[*i] - n).abs())
            .sum::<f64>()
    };
    let (coarse, fine) = (disagreement(1e-4), disagreement(1e-5));
    assert!(fine < coarse, "h=1e-5 gave {fine:e}, h=1e-4 gave {coarse:e}");
}

#[test]
fn pipeline_gradient_matches_finite_differences() {
    let fx = PipelineFixture::new(11).unwrap();
    let coords = fx.sample_coords(200, 11);
    let stats = fx.check(&coords, 1e-5).unwrap();
    assert!(stats.coords >= 200);
    assert!(stats.max_rel_err < 1e-4, "{stats:?}");
    assert!(relative_error(1.0, 1.0 + 1e-9, GRAD_FLOOR) < 1e-8);
}
