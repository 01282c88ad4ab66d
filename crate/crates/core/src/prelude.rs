// Items from `alloc` used across the crate, so modules read the same with
// or without `std`.
#![allow(unused_imports)]

pub(crate) use alloc::{
    borrow::ToOwned,
    boxed::Box,
    collections::{BTreeMap, BTreeSet},
    format,
    string::{String, ToString},
    sync::Arc,
    vec,
    vec::Vec,
};
