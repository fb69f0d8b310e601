//! Writes a small synthetic saliency dataset (`<root>/<name>/{images,masks}`).
//!
//! cargo run --example synth -- data synth 8 48

use std::path::PathBuf;
use std::process::ExitCode;

use gcpa_core::synthetic::{write_synthetic, SyntheticSpec};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let root = PathBuf::from(args.first().map_or("data", String::as_str));
    let name = args.get(1).map_or("synth", String::as_str);
    let count = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let size = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(48);
    match write_synthetic(&root, name, SyntheticSpec { count, size, seed: 11 }) {
        Ok(()) => {
            println!("wrote {count} pairs of {size}x{size} to {}", root.join(name).display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
