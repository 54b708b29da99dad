//! Shared fixtures for the CLI integration and acceptance tests: a synthetic
//! ODIR-format dataset (label CSV plus PNG images) where cataract eyes are
//! bright discs and normal eyes are dark noise.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fundusnet::data::synthetic::{bright_disc, dark_noise};
use fundusnet::rng::stream;
use fundusnet::tensor::Tensor;

pub struct Fixture {
    #[allow(dead_code)]
    pub root: tempfile::TempDir,
    pub csv: PathBuf,
    pub images: PathBuf,
}

pub const CSV_HEADER: &str = "ID,Patient Age,Patient Sex,Left-Fundus,Right-Fundus,Left-Diagnostic Keywords,Right-Diagnostic Keywords,N,D,G,C,A,H,M,O";

/// Write a `[h,w,1]` tensor in [0,1] as an 8-bit grayscale PNG.
pub fn write_png(path: &Path, t: &Tensor) {
    let (h, w) = (t.dims()[0] as u32, t.dims()[1] as u32);
    let img = image::GrayImage::from_fn(w, h, |x, y| {
        let v = t.at(&[y as usize, x as usize, 0]);
        image::Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
    });
    img.save(path).expect("png encode");
}

/// Build a dataset of `cataract_patients + normal_patients` rows, two eyes
/// each, with `size x size` images.
pub fn odir_fixture(cataract_patients: usize, normal_patients: usize, size: usize) -> Fixture {
    let root = tempfile::tempdir().expect("tempdir");
    let images = root.path().join("images");
    fs::create_dir(&images).expect("images dir");
    let mut rng = stream(2024, "fixture.images");

    let mut rows = vec![CSV_HEADER.to_string()];
    let mut id = 0usize;
    for _ in 0..cataract_patients {
        let (left, right) = (format!("{id}_left.png"), format!("{id}_right.png"));
        write_png(&images.join(&left), &bright_disc(size, size, &mut rng));
        write_png(&images.join(&right), &bright_disc(size, size, &mut rng));
        rows.push(format!(
            "{id},60,Female,{left},{right},cataract,cataract,0,0,0,1,0,0,0,0"
        ));
        id += 1;
    }
    for _ in 0..normal_patients {
        let (left, right) = (format!("{id}_left.png"), format!("{id}_right.png"));
        write_png(&images.join(&left), &dark_noise(size, size, &mut rng));
        write_png(&images.join(&right), &dark_noise(size, size, &mut rng));
        rows.push(format!(
            "{id},55,Male,{left},{right},normal fundus,normal fundus,1,0,0,0,0,0,0,0"
        ));
        id += 1;
    }

    let csv = root.path().join("labels.csv");
    fs::write(&csv, rows.join("\n") + "\n").expect("write csv");
    Fixture { root, csv, images }
}

// each test target compiles this module separately and uses its own subset
#[allow(dead_code)]
pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fundusnet"))
}

#[allow(dead_code)]
pub fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn fundusnet binary")
}

#[allow(dead_code)]
pub fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[allow(dead_code)]
pub fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Flat key=value training config for the tiny architecture.
pub fn tiny_train_config(
    manifest: &Path,
    images: &Path,
    out_dir: &Path,
    seed: u64,
    epochs: usize,
) -> String {
    format!(
        "# tiny training run\n\
         manifest = {}\n\
         images = {}\n\
         out_dir = {}\n\
         seed = {seed}\n\
         epochs = {epochs}\n\
         batch_size = 8\n\
         learning_rate = 0.003\n\
         input_height = 16\n\
         input_width = 16\n\
         input_channels = 1\n\
         conv_filters = 2,2,2\n\
         dense_units = 8\n\
         lstm_units = 4\n\
         seq_len = 1\n\
         dropout_rate = 0.2\n",
        manifest.display(),
        images.display(),
        out_dir.display(),
    )
}
