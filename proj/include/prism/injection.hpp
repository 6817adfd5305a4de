#pragma once

#include <array>
#include <compare>
#include <optional>
#include <string>
#include <string_view>

namespace prism {

/// The seven linear maps of a decoder block that accept adapters.
enum class PointName { q_proj, k_proj, v_proj, o_proj, gate_proj, up_proj, down_proj };

inline constexpr std::array<PointName, 7> kAllPoints = {
    PointName::q_proj,    PointName::k_proj,  PointName::v_proj,   PointName::o_proj,
    PointName::gate_proj, PointName::up_proj, PointName::down_proj,
};

inline constexpr std::array<PointName, 3> kFfnPoints = {PointName::gate_proj, PointName::up_proj,
                                                        PointName::down_proj};

std::string_view point_name_str(PointName name);
std::optional<PointName> parse_point_name(std::string_view text);
bool is_ffn_point(PointName name);

struct InjectionPoint {
    int layer_index = 0;
    PointName point_name = PointName::q_proj;
    int in_dim = 0;
    int out_dim = 0;

    std::string label() const;
    auto key() const { return std::pair{layer_index, point_name}; }
};

using PointKey = std::pair<int, PointName>;

}  // namespace prism
