//! Writes a two-class synthetic dataset in the `<root>/<class>/<file>.png`
//! layout expected by `mobilepipe prepare`.
//!
//! ```text
//! cargo run --example synthetic_dataset -- <out-dir> [left-right|border-bands] [per-class] [size] [seed]
//! ```

use std::path::PathBuf;

use mobilepipe::synthetic::{generate, Layout};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synthetic-data".into()));
    let layout = match args.next().as_deref() {
        None | Some("left-right") => Layout::LeftRight,
        Some("border-bands") => Layout::BorderBands,
        Some(other) => {
            eprintln!("unknown layout {other:?}; use left-right or border-bands");
            std::process::exit(2);
        }
    };
    let mut num = |default: u64| args.next().map(|s| s.parse().expect("integer argument")).unwrap_or(default);
    let per_class = num(40) as usize;
    let size = num(50) as usize;
    let seed = num(7);
    generate(layout, per_class, size, seed)
        .write(&out)
        .expect("write dataset");
    println!("wrote {} images per class to {}", per_class, out.display());
}
