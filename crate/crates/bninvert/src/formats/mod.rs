pub mod csv_out;
pub mod ppm;
pub mod synd;

use std::fs;
use std::path::Path;

use bninvert_core::nn::{checkpoint, Model};

use crate::error::{Error, Result};

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    fs::write(path, checkpoint::encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    if !path.is_file() {
        return Err(Error::usage(format!("checkpoint not found: {}", path.display())));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint::decode(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
