//! Box arithmetic, rasters, instance masks, affine resampling and alpha
//! compositing.

mod bbox;
mod composite;
mod image;
mod mask;

pub use self::bbox::{iou, BoundingBox};
pub use self::composite::{paste, paste_in_place};
pub use self::image::{Channels, PixelImage};
pub use self::mask::{affine_transform, sidecar_path, tighten, InstanceMask, MaskRecord};
