#pragma once

namespace t3 {

/// True when T3_DETERMINISTIC=1 is set in the environment, or after
/// set_deterministic(true). Deterministic mode pins every internal pool to
/// one thread.
bool deterministic_mode();
void set_deterministic(bool on);

/// Worker count for internal parallel loops and shard readers.
int worker_threads();

}  // namespace t3
