#include <json.hpp>

#include "fntk/errors.hpp"
#include "fntk/hash.hpp"
#include "fntk/io.hpp"
#include "fntk/net.hpp"

namespace fntk {

using nlohmann::json;

namespace {

json architecture_json(const MlpArchitecture& a) {
  return {{"input_dim", a.input_dim},
          {"hidden_widths", a.hidden_widths},
          {"output_dim", a.output_dim},
          {"activation", std::string(to_string(a.activation))},
          {"heteroscedastic", a.heteroscedastic},
          {"use_bias", a.use_bias}};
}

MlpArchitecture architecture_from(const json& j) {
  MlpArchitecture a;
  a.input_dim = j.at("input_dim").get<Index>();
  a.hidden_widths = j.at("hidden_widths").get<std::vector<Index>>();
  a.output_dim = j.at("output_dim").get<Index>();
  a.activation = parse_activation(j.at("activation").get<std::string>());
  a.heteroscedastic = j.value("heteroscedastic", false);
  a.use_bias = j.value("use_bias", true);
  a.validate();
  return a;
}

}  // namespace

std::string checkpoint_to_json(const MlpNetwork& net, const std::string& provenance_json) {
  json j;
  j["format"] = "fntk-checkpoint";
  j["layout_version"] = kCheckpointLayoutVersion;
  j["architecture"] = architecture_json(net.architecture());
  const Vector& t = net.theta();
  j["parameters"] = std::vector<double>(t.data(), t.data() + t.size());
  j["fingerprint"] = to_hex(net.fingerprint());
  if (!provenance_json.empty()) j["provenance"] = json::parse(provenance_json);
  return j.dump(1) + "\n";
}

MlpNetwork checkpoint_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw InputError(std::string("checkpoint: malformed JSON at byte ") +
                     std::to_string(e.byte) + ": " + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != "fntk-checkpoint") {
      throw InputError("checkpoint: unexpected format tag");
    }
    const int version = j.at("layout_version").get<int>();
    if (version != kCheckpointLayoutVersion) {
      throw InputError("checkpoint: unsupported layout version " + std::to_string(version));
    }
    const MlpArchitecture arch = architecture_from(j.at("architecture"));
    const auto values = j.at("parameters").get<std::vector<double>>();
    Vector theta = Eigen::Map<const Vector>(values.data(), static_cast<Index>(values.size()));
    MlpNetwork net(arch, ParameterVector(arch, std::move(theta)));
    if (j.contains("fingerprint") &&
        from_hex(j.at("fingerprint").get<std::string>()) != net.fingerprint()) {
      throw ConsistencyError("checkpoint: stored fingerprint does not match contents");
    }
    return net;
  } catch (const json::exception& e) {
    throw InputError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const MlpNetwork& net, const std::string& path,
                     const std::string& provenance_json) {
  write_file_atomic(path, checkpoint_to_json(net, provenance_json));
}

MlpNetwork load_checkpoint(const std::string& path) {
  return checkpoint_from_json(read_file(path));
}

}  // namespace fntk
