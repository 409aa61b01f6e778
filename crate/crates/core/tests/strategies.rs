mod common;

#[test]
fn frozen_tensors_stay_put_and_l_at_one_is_normal() {
    let a = common::strategy_audit(120, 25);
    assert!(a.efd_epochs > 0 && a.efed_epochs > 0);
    assert!(a.efd_constant, "EfD frozen checksum moved");
    assert!(a.efed_constant, "EfED frozen checksum moved");
    assert_eq!(a.efed_depth, 2);
    assert!(a.l_matches_normal);
}

#[test]
fn efed_stacks_four_layers_and_frozen_ones_get_no_gradient() {
    use hrcb::diffengine::Tape;
    use hrcb::encoders::{Arch, EncoderConfig};
    use hrcb::manifold::Space;
    use hrcb::objectives::{Dataset, Objective, Part, Prepared};
    use hrcb::trainer::{run_strategy, Seeds, StopStrategy, StrategyKind, StrategySpec, TrainConfig};
    use hrcb::treegen::complete_tree;

    let data = Dataset::from_hierarchy("c", &complete_tree(3, 4));
    let mut enc = EncoderConfig::new(Arch::Gcn, Space::hyperboloid(1.0), 4);
    enc.input_dim = 6;
    enc.hidden_dim = 6;
    let cfg = TrainConfig::new(enc);
    let stop = StopStrategy { max_epochs: 10, ..Default::default() };
    let spec = StrategySpec { kind: StrategyKind::Efed, lambda: 1.0, pretrain: Some(Objective::Gd) };
    let (model, out) = run_strategy(&cfg, &spec, Objective::Hr, &data, &stop, Seeds::all(2)).unwrap();

    let layers: Vec<&str> = model.params.iter().map(|(_, p)| p.name.as_str()).filter(|n| n.ends_with(".w0")).collect();
    assert_eq!(layers, ["enc0.l0.w0", "enc0.l1.w0", "enc1.l0.w0", "enc1.l1.w0"]);
    let frozen = model.frozen_ids();
    assert!(frozen.iter().all(|&id| model.params.get(id).name.starts_with("enc0.")));
    assert_eq!(frozen.len(), model.params.iter().filter(|(_, p)| p.name.starts_with("enc0.")).count());
    assert!(out.phases[1].frozen_checksums.windows(2).all(|w| w[0] == w[1]));

    let prep = Prepared::new(Objective::Hr, &data, Space::hyperboloid(1.0), 2).unwrap();
    for epoch in 0..3 {
        let mut t = Tape::new();
        let b = model.params.bind(&mut t);
        let x = model.forward_tape(&mut t, &b, &data).unwrap();
        let l = prep.loss(&mut t, x, None, Part::Train, epoch).unwrap();
        let grads = t.backward(l).unwrap();
        for &id in &frozen {
            let norm = grads.get(b.var(id)).map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>());
            assert_eq!(norm, 0.0);
        }
        let live = model.params.collect_grads(&b, &grads);
        assert!(live.iter().any(|(_, g)| g.iter().any(|&v| v != 0.0)));
    }
}
