#pragma once

namespace caesar {

/// Keeps freed tape buffers in the heap instead of returning them to the
/// kernel after every step. Call once at program start.
void configure_allocator();

}  // namespace caesar
