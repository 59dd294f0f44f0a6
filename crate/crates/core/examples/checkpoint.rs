//! Saves a model with its architecture spec, reloads it, and checks that
//! predictions are unchanged and that a mismatched spec is refused.

use t3d::arch::{load_checkpoint, load_checkpoint_as, save_checkpoint, tiny_densenet3d, tiny_t3d, Model};
use t3d::tensor::Tensor;

fn main() -> t3d::Result<()> {
    let dir = std::env::temp_dir().join("t3d-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| t3d::Error::Format(e.to_string()))?;
    let path = dir.join("tiny.ckpt");

    let model = Model::build(&tiny_t3d(), 42)?;
    save_checkpoint(&model, &path)?;
    let back = load_checkpoint(&path)?;
    println!("{} parameters, checksum {}", back.params.num_trainable(), back.params.checksum());

    let x = Tensor::randn(model.input_shape(2), 1.0, &mut rand::rng());
    assert_eq!(model.logits(&x)?, back.logits(&x)?);
    println!("reloaded logits identical");

    match load_checkpoint_as(&path, &tiny_densenet3d()) {
        Err(e) => println!("loading as tiny-densenet3d refused: {e}"),
        Ok(_) => unreachable!("spec mismatch must be rejected"),
    }
    Ok(())
}
