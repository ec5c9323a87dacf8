//! Placeholder; the C ABI surface lands after the core crate stabilizes.
