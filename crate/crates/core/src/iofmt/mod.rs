//! Weight files, random initialization and netpbm image I/O.

pub mod netpbm;
pub mod weights;

pub use netpbm::{
    argmax_classes, decode_netpbm, default_palette, read_palette, read_pgm, read_ppm, write_pgm,
    write_ppm_colorized, Normalization, Palette, Raster,
};
pub use weights::{load_weights, random_init, save_weights, NamedTensor, WeightStore};
