// Copyright Contributors to the voxfuse project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>

namespace voxfuse {

/// Worker cap used by the parallel loops; 0 means hardware concurrency.
void set_thread_count(int n);
int thread_count();

/// Runs fn(i) for i in [0, n) over contiguous blocks, one block per worker.
/// Callers write only to slot i, so results do not depend on the worker count.
void parallel_for(int n, const std::function<void(int)> &fn);

} // namespace voxfuse
