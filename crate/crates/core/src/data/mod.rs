//! Phase-contrast preprocessing, tiling, volume I/O and synthetic phantoms.

pub mod phantom;
pub mod preprocess;
pub mod slice;
pub mod tile;
pub mod volume;

pub use phantom::{generate_phantom, Nucleus, Phantom, PhantomSpec};
pub use preprocess::{bit_tiles, he_tiles, preprocess_volume, PreprocessConfig};
pub use slice::{background_subtract, to_eight_bit, RawSlice, ScalingScope, Slice8};
pub use tile::{make_three_channel, tile_grid, tile_volume, BitTile, HeTile, TileOrigin};
pub use volume::{
    load_gray8, load_labels, load_rgb8, load_volume, save_labels, save_volume, LabelVolume,
    LoadedVolume, Modality, Volume, VolumeMeta,
};
