//! Doc-test host for the guide in `book/`. Each chapter is included as the
//! documentation of an empty module so `cargo test` runs its code samples.

#![doc = include_str!("../../../book/src/introduction.md")]

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(tiling, "tiling.md");
chapter!(features, "features.md");
chapter!(store, "store.md");
chapter!(training, "training.md");
chapter!(detection, "detection.md");
chapter!(multi_stage, "multi-stage.md");
chapter!(evaluation, "evaluation.md");
chapter!(workbench, "workbench.md");
chapter!(annotation, "annotation.md");
chapter!(http_api, "http-api.md");
chapter!(formats, "formats.md");
