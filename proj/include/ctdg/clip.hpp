#pragma once

#include <cstdint>

namespace ctdg {

/// Number of past frames the generator consumes per prediction.
inline constexpr int64_t kClipLength = 5;
/// Image plus three flow channels.
inline constexpr int64_t kFrameChannels = 4;

}  // namespace ctdg
