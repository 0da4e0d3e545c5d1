pub mod dataset;
pub mod evalkit;
pub mod experiment;
pub mod fingerprint;
pub mod formats;
pub mod grad;
pub mod jamming;
pub mod loopback;
pub mod nn;
pub mod par;
pub mod poisoning;
pub mod signal;
pub mod spoofing;
