extern crate openblas_src as _;

pub mod error;
pub mod ident;
pub mod lti;
pub mod nlp;
pub mod par;
pub mod poly;
pub mod pop;
pub mod relax;
pub mod sdp;
pub mod signals;

pub use error::{Error, Result};
