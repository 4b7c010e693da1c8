//! Room layout reconstruction from unposed views: per-view plane layouts,
//! a global alignment of pair pointmaps, and a merge into one layout.
//!
//! [`pipeline::run_pipeline`] runs everything; [`scene`] makes test rooms
//! and [`metrics`] scores the result. The guide under `book/` walks through
//! each stage.

pub mod align;
pub mod geom;
pub mod io;
pub mod losses;
pub mod merge;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod room;
pub mod scene;
pub mod single_view;

macro_rules! book_chapters {
    ($($name:ident => $file:literal),* $(,)?) => {
        $(
            #[cfg(doctest)]
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub struct $name;
        )*
    };
}

book_chapters! {
    BookIntroduction => "introduction.md",
    BookSyntheticScenes => "synthetic-scenes.md",
    BookSingleView => "single-view.md",
    BookAlignment => "alignment.md",
    BookMerging => "merging.md",
    BookEvaluation => "evaluation.md",
    BookCommandLine => "command-line.md",
    BookFileFormats => "file-formats.md",
}
