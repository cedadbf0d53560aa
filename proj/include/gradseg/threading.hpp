#pragma once

namespace gradseg {

/// Caps the worker threads used by parallel kernels. All kernels are
/// written so results are identical for every thread count.
void set_max_threads(int n);
int max_threads();

}  // namespace gradseg
