//! Continuous kernel generators evaluated on coordinate grids.

pub mod checkpoint;
pub mod gabor;
pub mod grid;
pub mod init;
pub mod linear;
pub mod magnet;
pub mod siren;

pub use checkpoint::{magnet_checkpoint, magnet_from_checkpoint, Checkpoint};
pub use gabor::{gabor_layer_forward, gabor_on_tape, GaborLayer};
pub use grid::{make_grid, CoordinateGrid};
pub use init::{init_magnet, InitConfig};
pub use linear::Linear;
pub use magnet::{magnet_forward, magnet_on_tape, magnet_points_on_tape, mgn_forward, Kernel, Magnet, MagnetShape};
pub use siren::{init_siren, siren_forward, siren_on_tape, Siren, SirenShape};
