#include "embedkit/config.hpp"

#include <set>

#include "embedkit/io.hpp"

namespace embedkit {

using nlohmann::json;

namespace {

constexpr int kConfigVersion = 1;

// Strict object reader: records which keys were consumed, rejects the rest.
class Fields {
 public:
  Fields(const json& j, std::string what) : j_(j), what_(std::move(what)) {
    if (!j.is_object()) throw Error(Errc::InvalidConfig, what_ + " must be a JSON object");
  }

  template <class T>
  Fields& opt(const char* key, T& out) {
    seen_.insert(key);
    if (j_.contains(key)) {
      try {
        j_.at(key).get_to(out);
      } catch (const json::exception& e) {
        throw Error(Errc::InvalidConfig, what_ + "." + key + ": " + e.what());
      }
    }
    return *this;
  }

  Fields& skip(const char* key) {
    seen_.insert(key);
    return *this;
  }

  void done() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw Error(Errc::InvalidConfig, "unknown key '" + item.key() + "' in " + what_);
    }
  }

 private:
  const json& j_;
  std::string what_;
  std::set<std::string> seen_;
};

void check_version(const json& j, const std::string& what) {
  if (!j.is_object() || !j.contains("version")) throw Error(Errc::InvalidConfig, what + " needs a \"version\" key");
  if (!j.at("version").is_number_integer() || j.at("version").get<int>() != kConfigVersion) {
    throw Error(Errc::InvalidConfig, what + ": unsupported version " + j.at("version").dump());
  }
}

}  // namespace

void to_json(json& j, const ViTConfig& c) {
  j = json{{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"overlap", c.overlap},
           {"embed_dim", c.embed_dim},   {"depth", c.depth},           {"num_heads", c.num_heads},
           {"mlp_ratio", c.mlp_ratio},   {"in_channels", c.in_channels}};
}

void from_json(const json& j, ViTConfig& c) {
  Fields(j, "vit")
      .opt("image_size", c.image_size)
      .opt("patch_size", c.patch_size)
      .opt("overlap", c.overlap)
      .opt("embed_dim", c.embed_dim)
      .opt("depth", c.depth)
      .opt("num_heads", c.num_heads)
      .opt("mlp_ratio", c.mlp_ratio)
      .opt("in_channels", c.in_channels)
      .done();
}

void to_json(json& j, const MarginSchedule& c) {
  j = json{{"mode", c.mode == MarginMode::Dynamic ? "dynamic" : "fixed"},
           {"margin", c.margin},
           {"a", c.a},
           {"lambda", c.lambda},
           {"b", c.b},
           {"m_min", c.m_min},
           {"m_max", c.m_max}};
  if (!c.class_counts.empty()) j["class_counts"] = c.class_counts;
}

void from_json(const json& j, MarginSchedule& c) {
  std::string mode = c.mode == MarginMode::Dynamic ? "dynamic" : "fixed";
  Fields(j, "margin")
      .opt("mode", mode)
      .opt("margin", c.margin)
      .opt("a", c.a)
      .opt("lambda", c.lambda)
      .opt("b", c.b)
      .opt("m_min", c.m_min)
      .opt("m_max", c.m_max)
      .opt("class_counts", c.class_counts)
      .done();
  if (mode == "fixed") {
    c.mode = MarginMode::Fixed;
  } else if (mode == "dynamic") {
    c.mode = MarginMode::Dynamic;
  } else {
    throw Error(Errc::InvalidConfig, "margin.mode must be \"fixed\" or \"dynamic\"");
  }
}

void to_json(json& j, const HeadConfig& c) {
  j = json{{"num_classes", c.num_classes}, {"dropout", c.dropout}, {"scale", c.scale}, {"margin", c.margin}};
}

void from_json(const json& j, HeadConfig& c) {
  Fields(j, "head")
      .opt("num_classes", c.num_classes)
      .opt("dropout", c.dropout)
      .opt("scale", c.scale)
      .opt("margin", c.margin)
      .done();
}

void to_json(json& j, const ModelConfig& c) { j = json{{"vit", c.vit}, {"head", c.head}, {"seed", c.seed}}; }

void from_json(const json& j, ModelConfig& c) {
  Fields(j, "model").opt("vit", c.vit).opt("head", c.head).opt("seed", c.seed).done();
}

void to_json(json& j, const StageConfig& c) {
  j = json{{"name", c.name},
           {"epochs", c.epochs},
           {"lr", c.lr},
           {"momentum", c.momentum},
           {"weight_decay", c.weight_decay},
           {"resolution", c.resolution},
           {"overlap", c.overlap},
           {"frozen", c.frozen},
           {"dataset", c.dataset},
           {"batch_size", c.batch_size},
           {"seed", c.seed},
           {"plateau", c.plateau}};
  json scales = json::array();
  for (const auto& s : c.lr_scales) scales.push_back(json{{"glob", s.glob}, {"scale", s.scale}});
  j["lr_scales"] = scales;
}

void from_json(const json& j, StageConfig& c) {
  json scales = json::array();
  Fields(j, "stage")
      .opt("name", c.name)
      .opt("epochs", c.epochs)
      .opt("lr", c.lr)
      .opt("momentum", c.momentum)
      .opt("weight_decay", c.weight_decay)
      .opt("resolution", c.resolution)
      .opt("overlap", c.overlap)
      .opt("frozen", c.frozen)
      .opt("dataset", c.dataset)
      .opt("batch_size", c.batch_size)
      .opt("seed", c.seed)
      .opt("plateau", c.plateau)
      .opt("lr_scales", scales)
      .done();
  c.lr_scales.clear();
  for (const auto& s : scales) {
    LrScale scale;
    Fields(s, "lr_scales entry").opt("glob", scale.glob).opt("scale", scale.scale).done();
    c.lr_scales.push_back(scale);
  }
}

void to_json(json& j, const RecipeConfig& c) {
  j = json{{"head_epochs", c.head_epochs},
           {"backbone_epochs", c.backbone_epochs},
           {"head_lr", c.head_lr},
           {"backbone_lr", c.backbone_lr},
           {"momentum", c.momentum},
           {"weight_decay", c.weight_decay},
           {"batch_size", c.batch_size},
           {"seed", c.seed},
           {"dataset", c.dataset},
           {"resolution", c.resolution},
           {"overlap", c.overlap},
           {"resolution_steps", c.resolution_steps},
           {"lock_centers_only", c.lock_centers_only},
           {"plateau", c.plateau}};
}

void from_json(const json& j, RecipeConfig& c) {
  Fields(j, "recipe")
      .skip("template")
      .opt("head_epochs", c.head_epochs)
      .opt("backbone_epochs", c.backbone_epochs)
      .opt("head_lr", c.head_lr)
      .opt("backbone_lr", c.backbone_lr)
      .opt("momentum", c.momentum)
      .opt("weight_decay", c.weight_decay)
      .opt("batch_size", c.batch_size)
      .opt("seed", c.seed)
      .opt("dataset", c.dataset)
      .opt("resolution", c.resolution)
      .opt("overlap", c.overlap)
      .opt("resolution_steps", c.resolution_steps)
      .opt("lock_centers_only", c.lock_centers_only)
      .opt("plateau", c.plateau)
      .done();
}

void to_json(json& j, const SyntheticDatasetSpec& c) {
  j = json{{"version", kConfigVersion},
           {"name", c.name},
           {"num_classes", c.num_classes},
           {"samples_per_class", c.samples_per_class},
           {"profile", c.profile == ImbalanceProfile::LongTail ? "long-tail" : "uniform"},
           {"tail_exponent", c.tail_exponent},
           {"image_size", c.image_size},
           {"channels", c.channels},
           {"noise_sigma", c.noise_sigma},
           {"seed", c.seed}};
  if (!c.class_counts.empty()) j["class_counts"] = c.class_counts;
}

void from_json(const json& j, SyntheticDatasetSpec& c) {
  check_version(j, "dataset spec");
  std::string profile = c.profile == ImbalanceProfile::LongTail ? "long-tail" : "uniform";
  Fields(j, "dataset spec")
      .skip("version")
      .opt("name", c.name)
      .opt("num_classes", c.num_classes)
      .opt("samples_per_class", c.samples_per_class)
      .opt("class_counts", c.class_counts)
      .opt("profile", profile)
      .opt("tail_exponent", c.tail_exponent)
      .opt("image_size", c.image_size)
      .opt("channels", c.channels)
      .opt("noise_sigma", c.noise_sigma)
      .opt("seed", c.seed)
      .done();
  if (profile == "uniform") {
    c.profile = ImbalanceProfile::Uniform;
  } else if (profile == "long-tail") {
    c.profile = ImbalanceProfile::LongTail;
  } else {
    throw Error(Errc::InvalidConfig, "profile must be \"uniform\" or \"long-tail\"");
  }
}

StagePlan expand_recipe(const std::string& template_name, const RecipeConfig& recipe) {
  if (template_name == "head-locked") return head_locked_plan(recipe);
  if (template_name == "lp-ft") return lp_ft_plan(recipe);
  if (template_name == "split-lr") return split_lr_plan(recipe);
  throw Error(Errc::InvalidConfig, "unknown recipe template '" + template_name +
                                       "' (expected head-locked, lp-ft or split-lr)");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"version", kConfigVersion}, {"model", c.model}, {"stages", c.plan.stages}};
  if (c.init_checkpoint) j["init_checkpoint"] = *c.init_checkpoint;
  if (c.head_from) j["head_from"] = *c.head_from;
}

void from_json(const json& j, TrainConfig& c) {
  check_version(j, "train config");
  json recipe;
  std::string init, head;
  Fields(j, "train config")
      .skip("version")
      .opt("model", c.model)
      .opt("stages", c.plan.stages)
      .opt("recipe", recipe)
      .opt("init_checkpoint", init)
      .opt("head_from", head)
      .done();
  if (!init.empty()) c.init_checkpoint = init;
  if (!head.empty()) c.head_from = head;
  if (!recipe.is_null()) {
    if (j.contains("stages")) throw Error(Errc::InvalidConfig, "give either \"stages\" or \"recipe\", not both");
    if (!recipe.is_object() || !recipe.contains("template") || !recipe.at("template").is_string()) {
      throw Error(Errc::InvalidConfig, "recipe needs a \"template\" string");
    }
    c.plan = expand_recipe(recipe.at("template").get<std::string>(), recipe.get<RecipeConfig>());
  }
  c.plan.validate();
}

json parse_json(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidConfig, origin + ": " + e.what());
  }
}

namespace {

template <class T>
T load_config(const std::filesystem::path& path) {
  const json j = parse_json(read_file(path), path.string());
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw Error(Errc::InvalidConfig, path.string() + ": " + e.what());
  }
}

}  // namespace

TrainConfig load_train_config(const std::filesystem::path& path) { return load_config<TrainConfig>(path); }

SyntheticDatasetSpec load_dataset_spec(const std::filesystem::path& path) {
  return load_config<SyntheticDatasetSpec>(path);
}

}  // namespace embedkit
