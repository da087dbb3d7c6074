// Adapter for SAM / MedSAM checkpoints. Inference runs in a child process
// speaking one JSON object per line over stdin/stdout; see tools/sam_worker.py.

#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <mutex>

#include <nlohmann/json.hpp>

#include "samatch/segmenter.hpp"

namespace samatch {

namespace {

using nlohmann::json;

/// Checks the upstream serialization: a torch zip archive (or legacy pickle)
/// whose state dict carries the three SAM sub-module prefixes.
void validate_checkpoint(const std::string& path) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw IoError("segmenter checkpoint not found: " + path);
  if (!fs::is_regular_file(path)) throw IoError("segmenter checkpoint is not a regular file: " + path);
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open segmenter checkpoint: " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const bool zip = bytes.size() >= 4 && bytes.compare(0, 4, "PK\x03\x04", 4) == 0;
  const bool legacy = !bytes.empty() && static_cast<unsigned char>(bytes[0]) == 0x80;
  if (!zip && !legacy) throw IoError("segmenter checkpoint is not a torch serialization: " + path);
  if (zip && bytes.find("data.pkl") == std::string::npos) {
    throw IoError("segmenter checkpoint archive has no data.pkl: " + path);
  }
  for (const char* prefix : {"image_encoder.", "prompt_encoder.", "mask_decoder."}) {
    if (bytes.find(prefix) == std::string::npos) {
      throw IoError(std::string("segmenter checkpoint lacks '") + prefix + "' weights: " + path);
    }
  }
}

class WorkerProcess {
 public:
  explicit WorkerProcess(const std::string& command) {
    int to_child[2];
    int from_child[2];
    if (pipe(to_child) != 0) throw Error("cannot create worker pipe");
    if (pipe(from_child) != 0) {
      close(to_child[0]);
      close(to_child[1]);
      throw Error("cannot create worker pipe");
    }
    pid_ = fork();
    if (pid_ < 0) throw Error("cannot fork segmenter worker");
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    out_ = fdopen(to_child[1], "w");
    in_ = fdopen(from_child[0], "r");
    if (!out_ || !in_) throw Error("cannot attach to segmenter worker pipes");
  }

  WorkerProcess(const WorkerProcess&) = delete;
  WorkerProcess& operator=(const WorkerProcess&) = delete;

  ~WorkerProcess() {
    if (out_) {
      std::fputs("{\"op\":\"quit\"}\n", out_);
      std::fclose(out_);
    }
    if (in_) std::fclose(in_);
    if (pid_ > 0) {
      int status = 0;
      waitpid(pid_, &status, 0);
    }
  }

  json call(const json& request) {
    std::lock_guard<std::mutex> lock(mutex_);
    const std::string line = request.dump() + "\n";
    if (std::fputs(line.c_str(), out_) < 0 || std::fflush(out_) != 0) {
      throw Error("segmenter worker closed its input");
    }
    std::string reply;
    char buffer[1 << 16];
    while (std::fgets(buffer, sizeof buffer, in_)) {
      reply += buffer;
      if (!reply.empty() && reply.back() == '\n') break;
    }
    if (reply.empty()) throw Error("segmenter worker exited without replying to '" + request.value("op", "") + "'");
    json parsed;
    try {
      parsed = json::parse(reply);
    } catch (const json::exception& e) {
      throw Error(std::string("segmenter worker sent malformed output: ") + e.what());
    }
    if (!parsed.value("ok", false)) {
      const std::string message = parsed.value("error", "unknown failure");
      if (parsed.value("kind", "") == "shape") throw ShapeError("segmenter worker: " + message);
      if (parsed.value("kind", "") == "io") throw IoError("segmenter worker: " + message);
      throw Error("segmenter worker: " + message);
    }
    return parsed;
  }

 private:
  pid_t pid_ = -1;
  std::FILE* out_ = nullptr;
  std::FILE* in_ = nullptr;
  std::mutex mutex_;
};

json image_json(const ImageSample& image) {
  return json{{"height", image.height()},
              {"width", image.width()},
              {"pixels", std::vector<double>(image.pixels.data(), image.pixels.data() + image.pixels.size())}};
}

json prompt_json(const ClassPromptSet& prompts, const SegmenterCapabilities& caps) {
  json points = json::array();
  if (caps.accepts_points) {
    for (const auto& p : prompts.points) points.push_back({p.row, p.col, p.polarity == Polarity::positive ? 1 : 0});
  }
  json box = nullptr;
  if (caps.accepts_boxes && prompts.box) {
    box = {prompts.box->row_min, prompts.box->col_min, prompts.box->row_max, prompts.box->col_max};
  }
  return json{{"class", prompts.class_id}, {"points", points}, {"box", box}};
}

class ExternalSegmenter final : public PromptableSegmenter {
 public:
  ExternalSegmenter(const ExternalSegmenterConfig& config)
      : model_(config.model), worker_(config.worker_command) {
    worker_.call(json{{"op", "load"},
                      {"model", model_ == ExternalModel::sam ? "sam" : "medsam"},
                      {"checkpoint", config.checkpoint_path},
                      {"device", config.device}});
  }

  std::string kind() const override { return model_ == ExternalModel::sam ? "sam" : "medsam"; }
  SegmenterCapabilities capabilities() const override {
    return model_ == ExternalModel::sam ? SegmenterCapabilities{true, false} : SegmenterCapabilities{false, true};
  }
  bool trainable() const override { return true; }
  std::vector<std::string> trainable_parts() const override { return {"prompt_encoder", "mask_decoder"}; }

  double finetune(const ImageSample& image, const LabelMask& truth, const PromptBundle& bundle, double lr) override {
    require_same_shape(image, truth);
    json classes = json::array();
    for (const auto& entry : bundle.classes) {
      check_prompt_supported(capabilities(), entry, kind());
      json item = prompt_json(entry, capabilities());
      const MaskPlane target = truth.classes == entry.class_id;
      std::vector<int> bits(static_cast<std::size_t>(target.size()));
      for (Eigen::Index i = 0; i < target.size(); ++i) bits[static_cast<std::size_t>(i)] = target.data()[i] ? 1 : 0;
      item["target"] = bits;
      classes.push_back(std::move(item));
    }
    json request = image_json(image);
    request["op"] = "finetune";
    request["lr"] = lr;
    request["classes"] = classes;
    return worker_.call(request).at("loss").get<double>();
  }

 protected:
  PlaneD segment_impl(const ImageSample& image, const ClassPromptSet& prompts) const override {
    json request = image_json(image);
    request["op"] = "segment";
    request["prompt"] = prompt_json(prompts, capabilities());
    const json reply = worker_.call(request);
    const auto scores = reply.at("scores").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(scores.size()) != image.pixels.size()) {
      throw ShapeError("segmenter worker returned " + std::to_string(scores.size()) + " scores for a " +
                       std::to_string(image.height()) + "x" + std::to_string(image.width()) + " image");
    }
    PlaneD out(image.height(), image.width());
    std::copy(scores.begin(), scores.end(), out.data());
    return out;
  }

 private:
  ExternalModel model_;
  mutable WorkerProcess worker_;
};

}  // namespace

std::unique_ptr<PromptableSegmenter> load_external_segmenter(const ExternalSegmenterConfig& config) {
  validate_checkpoint(config.checkpoint_path);
  std::signal(SIGPIPE, SIG_IGN);
  return std::make_unique<ExternalSegmenter>(config);
}

ExternalModel parse_external_model(const std::string& text) {
  if (text == "sam") return ExternalModel::sam;
  if (text == "medsam") return ExternalModel::medsam;
  throw ConfigError("unknown external segmenter '" + text + "' (expected sam or medsam)");
}

}  // namespace samatch
