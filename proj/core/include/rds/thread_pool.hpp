#pragma once

#include <cstddef>
#include <functional>

namespace rds {

/// Process-wide worker pool. Work items write to disjoint output slots and
/// reductions happen in index order after the join, so results do not depend
/// on the number of workers.
void set_worker_count(int n);
int worker_count();

/// Runs fn(i) for i in [0, n). Blocks until all items finished. Reentrant
/// calls from inside a work item run inline.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace rds
