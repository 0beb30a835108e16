//! Writes procedural HQ scenes for trying the pipeline without a photo set.
//!
//! cargo run --release -p msrnet --example scenes -- OUT_DIR [COUNT] [SIZE] [SEED]

use std::path::PathBuf;

use msrnet::data::{procedural_scene, save_rgb};

fn main() -> msrnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "scenes".into()));
    let mut num = |default: u64| args.next().map(|a| a.parse().expect("numeric argument")).unwrap_or(default);
    let (count, size, seed) = (num(50), num(128) as usize, num(0));
    std::fs::create_dir_all(&out)?;
    for i in 0..count {
        save_rgb(out.join(format!("scene{i:03}.png")), &procedural_scene(size, size, seed + i))?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}
