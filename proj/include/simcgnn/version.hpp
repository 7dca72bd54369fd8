#pragma once

namespace simcgnn {
inline constexpr const char* version = "0.1.0";
}
