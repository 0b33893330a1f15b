//! Color-aware multi-style transfer.
//!
//! A generated image is optimized so that, for every color in a palette
//! shared by the content and style images, the Gram statistics of its
//! color-weighted features match those of the style image.

pub mod error;
pub mod features;
pub mod imaging;
pub mod lbfgs;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod objective;
pub mod palette;
pub mod synthetic;
pub mod transfer;

pub use error::{CamsError, Result};
pub use features::{
    load_backbone, load_with_architecture, Architecture, BackboneConfig, BackboneSpec, FeatureExtractor, FeatureMap,
    FeatureTaps, Normalization,
};
pub use imaging::{
    decode_image, encode_png, gaussian_blur, load_image, resize_bilinear, save_image, Image, ScalarField,
};
pub use losses::{
    association_loss, cams_loss, classic_style_loss, content_loss, gram_matrix, total_loss, weighted_gram_matrix,
    GramMatrix, GramSet, LossWeights,
};
pub use masking::{adapt_mask_to_layer, build_mask_set, compute_color_mask, LayerMask, MaskSet};
pub use metrics::{evaluate_triple, EvalReport};
pub use palette::{extract_palette, merge_palettes, ExtractedPalette, Palette, PaletteSource, Rgb};
pub use transfer::{
    run_classic_nst, run_transfer, AssociationMap, LossRecord, TransferConfig, TransferMode, TransferResult,
    TransferState,
};
