use outpaint_core::Config;

const TOY: &str = include_str!("../../../configs/toy.toml");
const OVERFIT: &str = include_str!("../../../configs/overfit.toml");
const PAPER: &str = include_str!("../../../configs/paper.toml");

#[test]
fn shipped_toy_config_is_the_preset() {
    assert_eq!(Config::from_toml_str(TOY).unwrap(), Config::toy());
}

#[test]
fn partial_sections_fall_back_to_defaults() {
    let cfg = Config::from_toml_str(OVERFIT).unwrap();
    let mut want = Config::toy();
    want.loss.lambda_adv = 0.01;
    want.train.lr_g = 1e-3;
    want.train.lr_d = 1e-3;
    want.train.checkpoint_every = 0;
    assert_eq!(cfg, want);
}

#[test]
fn shipped_paper_config_matches_preset_model() {
    let cfg = Config::from_toml_str(PAPER).unwrap();
    assert_eq!(cfg.model, Config::paper().model);
    assert_eq!(cfg.geometry, Config::paper().geometry);
    let g = cfg.geometry().unwrap();
    assert_eq!((g.full_h(), g.with_steps(2).full_h()), (192, 256));
}

#[test]
fn toml_roundtrip_and_rejections() {
    let cfg = Config::paper();
    assert_eq!(Config::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    let unknown = TOY.replace("margin = 8", "margin = 8\nbogus = 1");
    assert!(Config::from_toml_str(&unknown).is_err());
    let indivisible = TOY.replace("center_h = 32", "center_h = 30");
    assert!(Config::from_toml_str(&indivisible).is_err());
}
