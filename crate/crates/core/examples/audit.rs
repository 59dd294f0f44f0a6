//! Shape, parameter and MAC audit of the full-size networks on
//! 16-frame 224×224 clips, with the T3D / DenseNet3D parameter ratio.
//!
//! `cargo run --release --example audit -- [arch]`

use t3d::arch::{audit, param_ratio, ArchSpec};

fn main() -> t3d::Result<()> {
    let input = [3, 16, 224, 224];
    if let Some(name) = std::env::args().nth(1) {
        println!("{}", audit(&ArchSpec::preset(&name)?.with_input(input))?);
        return Ok(());
    }
    for (t3d, dense) in [("t3d-121", "densenet3d-121"), ("t3d-169", "densenet3d-169")] {
        let a = audit(&ArchSpec::preset(t3d)?.with_input(input))?;
        let b = audit(&ArchSpec::preset(dense)?.with_input(input))?;
        println!("{a}\n\n{b}\n");
        println!("parameter ratio {t3d} / {dense}: {:.3}\n", param_ratio(&a, &b));
    }
    Ok(())
}
