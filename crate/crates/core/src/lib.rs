//! Cascade landmark tracking for 2D image sequences.
//!
//! An attention regressor narrows a fixed search patch, a proposal detector
//! scores anchors and refines the best ones through box, classification and
//! mask heads, an LSTM folds a short history of proposal features into the
//! box and classification heads, and a distance-aware score picks the final
//! position each frame.

pub mod ndtensor;
pub mod boxgeom;
pub mod losses;
pub mod recurrent;
pub mod temporal_select;
pub mod dataio;
pub mod cascade;
pub mod trainer;
pub mod evalbench;
