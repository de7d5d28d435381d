// Copyright (c) 2026, comol-lab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "json.hpp"

namespace comol::detail {

// Literals built in code are signed even when non-negative.
inline bool is_count(const nlohmann::json& j) {
    return j.is_number_unsigned() || (j.is_number_integer() && j.get<std::int64_t>() >= 0);
}

}  // namespace comol::detail
