#pragma once

namespace dis {

/// Keeps large freed blocks on the heap instead of returning them to the
/// system, so per-step activation buffers are not re-faulted every step.
/// Process-wide; a no-op outside glibc.
void keep_heap_mapped();

} // namespace dis
