//! Object-wise conditions: text lists, image lists, global prompts and masks.

pub mod canvas;
pub mod encoders;
pub mod mask;
pub mod text;

pub use canvas::{
    build_condition_triplet, build_image_list, paste_on_canvas, stack_image_lists, Canvas, ConditionTriplet,
    ForegroundPool, ImageList,
};
pub use encoders::{
    channel_presets, stack_text_lists, ImageEncoderChannels, ImageListEncoder, TextEmbedder, TextListEncoder,
    TokenHashEmbedder,
};
pub use mask::{boxes_to_mask, rasterize_foreground_mask, CountMask, ForegroundMask};
pub use text::{build_global_prompt, build_text_list, TextList};
