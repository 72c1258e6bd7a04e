//! Sparse control-node deformation of 3D Gaussian primitives.
//!
//! Nodes carry cubic Hermite trajectories; primitives follow a
//! dual-quaternion blend of their nearest nodes. Nodes are initialized from
//! back-projected image patches with motion-adaptive compression, fitted to
//! tracklets and refined by gradient descent. A synthetic scene harness
//! supplies ground truth. The guide in `book/` walks through each part.

pub mod deform;
pub mod harness;
pub mod node_init;
pub mod optimize;
pub mod rigid;
pub mod pipeline;
pub mod spline;

// Runs the guide's code blocks as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/rigid.md")]
    mod rigid {}
    #[doc = include_str!("../../../book/src/trajectories.md")]
    mod trajectories {}
    #[doc = include_str!("../../../book/src/deformation.md")]
    mod deformation {}
    #[doc = include_str!("../../../book/src/node-init.md")]
    mod node_init {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/optimization.md")]
    mod optimization {}
}
