//! Regenerates the committed synthetic task model:
//! `cargo run --example make_fixture -- fixtures/synthetic_l32.json`

use layerbudget::evaluators::SaturatingTaskModel;

fn main() -> layerbudget::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "fixtures/synthetic_l32.json".into());
    let model = SaturatingTaskModel::mid_peaked(32, 2024)?;
    let mut text = serde_json::to_string_pretty(&model)?;
    text.push('\n');
    std::fs::write(&path, text)?;
    println!("wrote {path}");
    Ok(())
}
