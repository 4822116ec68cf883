#pragma once

#include <json.hpp>

#include "crl/nnet.hpp"

namespace crl::nnet {

inline void to_json(nlohmann::json& j, const NetShape& s) {
    j = {{"input_dim", s.input_dim},
         {"hidden_dims", s.hidden_dims},
         {"output_dim", s.output_dim},
         {"use_layernorm", s.use_layernorm},
         {"dropout_rate", s.dropout_rate}};
}

inline void from_json(const nlohmann::json& j, NetShape& s) {
    j.at("input_dim").get_to(s.input_dim);
    j.at("hidden_dims").get_to(s.hidden_dims);
    j.at("output_dim").get_to(s.output_dim);
    j.at("use_layernorm").get_to(s.use_layernorm);
    j.at("dropout_rate").get_to(s.dropout_rate);
}

}  // namespace crl::nnet
