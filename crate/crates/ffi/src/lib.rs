//! C ABI surface for the poirec library. See `include/poirec.h`.
