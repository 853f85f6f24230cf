//! Regenerate the committed per-model cost fixtures:
//! `cargo run -p mvtk-cost --example gen_goldens -- crates/mvtk-cost/tests/goldens`

use mvtk_zoo::{build, named_spec, NAMED_MODELS};

fn main() {
    let dir = std::env::args().nth(1).expect("usage: gen_goldens <dir>");
    std::fs::create_dir_all(&dir).unwrap();
    let mut specs: Vec<_> = NAMED_MODELS
        .iter()
        .map(|n| named_spec(n).unwrap())
        .collect();
    for n in ["mobilevitv3-xxs", "mobilevitv3-xs", "mobilevitv3-s"] {
        specs.push(named_spec(n).unwrap().with_layer4_blocks(2));
    }
    for spec in specs {
        let model = build::<f32>(&spec, 0).unwrap();
        let rep = mvtk_cost::report(&model, 256, false).unwrap();
        let path = format!("{dir}/{}.csv", spec.name);
        std::fs::write(&path, rep.to_csv()).unwrap();
        println!("wrote {path}");
    }
}
