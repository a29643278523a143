/* Copyright 2026 The EdgeCare Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <queue>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "edgecare/checkpoint.hpp"
#include "edgecare/datagen.hpp"
#include "edgecare/error.hpp"
#include "edgecare/pipeline.hpp"
#include "edgecare/stream_infer.hpp"
#include "edgecare/transfer.hpp"

namespace edgecare {

// ---------------------------------------------------------------------------
// Topology
// ---------------------------------------------------------------------------

enum class Role { kSensor, kEdge, kCloud, kCaregiver };
enum class Zone { kHome, kOutside };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::kSensor: return "SENSOR";
    case Role::kEdge: return "EDGE";
    case Role::kCloud: return "CLOUD";
    case Role::kCaregiver: return "CAREGIVER";
  }
  return "UNKNOWN";
}

inline const char* to_string(Zone z) { return z == Zone::kHome ? "HOME" : "OUTSIDE"; }

inline Role role_from_string(const std::string& s) {
  if (s == "SENSOR") return Role::kSensor;
  if (s == "EDGE") return Role::kEdge;
  if (s == "CLOUD") return Role::kCloud;
  if (s == "CAREGIVER") return Role::kCaregiver;
  throw ConfigError("unknown node role '" + s + "'");
}

struct NodeId {
  Role role = Role::kSensor;
  std::size_t index = 0;

  Zone zone() const noexcept { return role == Role::kSensor || role == Role::kEdge ? Zone::kHome : Zone::kOutside; }

  // "sensor0", "edge0", "cloud0", "caregiver0".
  std::string name() const {
    std::string r = to_string(role);
    std::transform(r.begin(), r.end(), r.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return r + std::to_string(index);
  }

  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

inline NodeId node_from_name(const std::string& name) {
  static const std::pair<const char*, Role> prefixes[] = {
      {"sensor", Role::kSensor}, {"edge", Role::kEdge}, {"cloud", Role::kCloud}, {"caregiver", Role::kCaregiver}};
  for (const auto& [prefix, role] : prefixes) {
    const std::string p = prefix;
    if (name.rfind(p, 0) == 0 && name.size() > p.size() &&
        std::all_of(name.begin() + static_cast<std::ptrdiff_t>(p.size()), name.end(),
                    [](unsigned char c) { return std::isdigit(c); })) {
      return {role, static_cast<std::size_t>(std::stoul(name.substr(p.size())))};
    }
  }
  throw ConfigError("unknown node '" + name + "'");
}

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

enum class MessageKind { kFrameBatch, kModelPush, kModelRequest, kInferenceEvent, kAck };

inline const char* to_string(MessageKind k) {
  switch (k) {
    case MessageKind::kFrameBatch: return "FRAME_BATCH";
    case MessageKind::kModelPush: return "MODEL_PUSH";
    case MessageKind::kModelRequest: return "MODEL_REQUEST";
    case MessageKind::kInferenceEvent: return "INFERENCE_EVENT";
    case MessageKind::kAck: return "ACK";
  }
  return "UNKNOWN";
}

// The only payload with a tensor. Labels travel only with ground-labeled
// training data; live sensor batches carry none.
struct FrameBatch {
  std::string stream_id;
  std::size_t first_frame = 0;
  Tensor frames;  // [n, channels, H, W]
  std::vector<std::uint16_t> labels;
  bool last = false;
};

struct ModelPush {
  std::vector<std::uint8_t> checkpoint;  // TLEC bytes
};

struct ModelRequest {
  json body;
};

struct InferencePayload {
  InferenceEvent event;
};

struct Ack {
  std::uint64_t seq = 0;
};

// Alternative index equals the MessageKind value.
using Payload = std::variant<FrameBatch, ModelPush, ModelRequest, InferencePayload, Ack>;

inline MessageKind kind_of(const Payload& p) { return static_cast<MessageKind>(p.index()); }

// Wire bytes: 8-bit frames plus 16-bit labels, checkpoint bytes, or a JSON text.
inline std::vector<std::uint8_t> serialize_payload(const Payload& p) {
  struct Visitor {
    std::vector<std::uint8_t> operator()(const FrameBatch& b) const {
      std::vector<std::uint8_t> out;
      out.reserve(b.frames.size() + 2 * b.labels.size());
      for (double v : b.frames.values()) out.push_back(static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))));
      for (auto l : b.labels) {
        out.push_back(static_cast<std::uint8_t>(l & 0xff));
        out.push_back(static_cast<std::uint8_t>(l >> 8));
      }
      return out;
    }
    std::vector<std::uint8_t> operator()(const ModelPush& m) const { return m.checkpoint; }
    std::vector<std::uint8_t> operator()(const ModelRequest& r) const { return text(r.body.dump()); }
    std::vector<std::uint8_t> operator()(const InferencePayload& e) const { return text(to_json_line(e.event)); }
    std::vector<std::uint8_t> operator()(const Ack& a) const { return text(json{{"ack", a.seq}}.dump()); }
    static std::vector<std::uint8_t> text(const std::string& s) { return {s.begin(), s.end()}; }
  };
  return std::visit(Visitor{}, p);
}

struct Message {
  std::uint64_t seq = 0;
  NodeId src;
  NodeId dst;
  Payload payload;
  std::size_t size_bytes = 0;
  std::uint64_t send_tick = 0;
  std::uint64_t delivery_tick = 0;

  MessageKind kind() const { return kind_of(payload); }
};

struct BoundaryDecision {
  bool accepted = true;
  std::string reason;
};

// Raw frames never leave the home. Trained weights encode home data, so models
// may enter the home but not leave it.
inline BoundaryDecision check_boundary(MessageKind kind, const NodeId& src, const NodeId& dst) {
  if (src.zone() == Zone::kHome && dst.zone() == Zone::kOutside) {
    if (kind == MessageKind::kFrameBatch) return {false, "raw data crossing home boundary"};
    if (kind == MessageKind::kModelPush) return {false, "model weights crossing home boundary"};
  }
  return {};
}

inline BoundaryDecision check_boundary(const Message& m) { return check_boundary(m.kind(), m.src, m.dst); }

// Undirected link.
struct LinkSpec {
  NodeId a;
  NodeId b;
  std::uint64_t latency_ticks = 0;
  std::uint64_t bandwidth_bytes_per_tick = 1;

  bool connects(const NodeId& x, const NodeId& y) const { return (a == x && b == y) || (a == y && b == x); }
  std::string name() const { return std::min(a, b).name() + "<->" + std::max(a, b).name(); }
  std::uint64_t delivery_tick(std::uint64_t send_tick, std::size_t size_bytes) const {
    return send_tick + latency_ticks + (size_bytes + bandwidth_bytes_per_tick - 1) / bandwidth_bytes_per_tick;
  }
};

struct TrafficLedger {
  std::map<std::string, std::uint64_t> link_bytes;
  std::map<std::string, std::uint64_t> kind_counts;  // delivered messages
  std::uint64_t boundary_bytes = 0;                  // delivered HOME -> OUTSIDE
  std::uint64_t delivered_bytes = 0;
  std::uint64_t rejected = 0;

  void record_delivery(const Message& m, const LinkSpec& link) {
    link_bytes[link.name()] += m.size_bytes;
    ++kind_counts[to_string(m.kind())];
    delivered_bytes += m.size_bytes;
    if (m.src.zone() == Zone::kHome && m.dst.zone() == Zone::kOutside) boundary_bytes += m.size_bytes;
  }
};

inline json to_json(const TrafficLedger& l) {
  return {{"link_bytes", l.link_bytes},
          {"kind_counts", l.kind_counts},
          {"boundary_bytes", l.boundary_bytes},
          {"delivered_bytes", l.delivered_bytes},
          {"rejected", l.rejected}};
}

// ---------------------------------------------------------------------------
// Caregiver
// ---------------------------------------------------------------------------

enum class CareAction { kNone, kNotify, kEscalate };

inline const char* to_string(CareAction a) {
  switch (a) {
    case CareAction::kNone: return "NONE";
    case CareAction::kNotify: return "NOTIFY";
    case CareAction::kEscalate: return "ESCALATE";
  }
  return "UNKNOWN";
}

struct CaregiverHistory {
  std::size_t repeat_threshold = 5;  // R
  std::size_t rolling_window = 20;   // L
  std::deque<std::pair<std::string, Category>> recent;
};

// Records `event` in `history`, then decides. A routine activity notifies once
// it makes up R of the last L events.
inline CareAction caregiver_policy(const InferenceEvent& event, CaregiverHistory& history) {
  history.recent.emplace_back(event.activity, event.category);
  while (history.recent.size() > history.rolling_window) history.recent.pop_front();
  switch (event.category) {
    case Category::kAlert: return CareAction::kEscalate;
    case Category::kServiceRequest: return CareAction::kNotify;
    case Category::kInfo: break;
  }
  const auto repeats = std::count_if(history.recent.begin(), history.recent.end(), [&](const auto& r) {
    return r.second == Category::kInfo && r.first == event.activity;
  });
  return static_cast<std::size_t>(repeats) >= history.repeat_threshold ? CareAction::kNotify : CareAction::kNone;
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

struct StreamConfig {
  std::size_t segments_per_sensor = 8;
  std::size_t min_segment_len = 48;
  std::size_t max_segment_len = 96;
  std::size_t frames_per_batch = 16;
  std::uint64_t batch_interval_ticks = 2;
  std::uint64_t start_tick = 0;
};

struct Timing {
  std::uint64_t train_ticks = 600;
  std::uint64_t finetune_ticks = 60;
};

struct DatasetSeeds {
  std::uint64_t source = 1;
  std::uint64_t target = 2;
  std::uint64_t stream = 3;
};

struct Scenario {
  std::vector<NodeId> nodes;
  std::vector<LinkSpec> links;
  DatasetSeeds seeds;
  CloudTrainingConfig cloud;
  EdgeFineTuneConfig edge;
  StreamConfig stream;
  WindowConfig window;
  CategoryMap categories;
  std::size_t repeat_threshold = 5;
  std::size_t rolling_window = 20;
  Timing timing;

  const LinkSpec* find_link(const NodeId& x, const NodeId& y) const {
    for (const auto& l : links) {
      if (l.connects(x, y)) return &l;
    }
    return nullptr;
  }
  std::vector<NodeId> with_role(Role r) const {
    std::vector<NodeId> out;
    for (const auto& n : nodes) {
      if (n.role == r) out.push_back(n);
    }
    return out;
  }
};

// Checks everything a run depends on; nothing executes on a bad scenario.
inline void validate(const Scenario& s, bool baseline) {
  for (std::size_t i = 0; i < s.nodes.size(); ++i) {
    for (std::size_t j = i + 1; j < s.nodes.size(); ++j) {
      if (s.nodes[i] == s.nodes[j]) throw ConfigError("duplicate node " + s.nodes[i].name());
    }
  }
  for (Role r : {Role::kEdge, Role::kCloud, Role::kCaregiver}) {
    if (s.with_role(r).size() != 1) throw ConfigError(std::string("scenario needs exactly one ") + to_string(r) + " node");
  }
  auto known = [&](const NodeId& n) { return std::find(s.nodes.begin(), s.nodes.end(), n) != s.nodes.end(); };
  for (const auto& l : s.links) {
    if (!known(l.a)) throw ConfigError("link references unknown node " + l.a.name());
    if (!known(l.b)) throw ConfigError("link references unknown node " + l.b.name());
    if (l.a == l.b) throw ConfigError("link from " + l.a.name() + " to itself");
    if (l.bandwidth_bytes_per_tick == 0) throw ConfigError("link " + l.name() + " has zero bandwidth");
  }
  const NodeId edge = s.with_role(Role::kEdge)[0], cloud = s.with_role(Role::kCloud)[0],
               care = s.with_role(Role::kCaregiver)[0];
  std::vector<std::pair<NodeId, NodeId>> required{{edge, cloud}, {edge, care}};
  for (const auto& sensor : s.with_role(Role::kSensor)) required.emplace_back(sensor, edge);
  if (baseline) required.emplace_back(cloud, care);
  for (const auto& [x, y] : required) {
    if (!s.find_link(x, y)) throw ConfigError("missing link " + x.name() + "<->" + y.name());
  }
  s.window.validate();
  if (s.stream.frames_per_batch == 0) throw ConfigError("frames_per_batch must be positive");
  if (s.stream.segments_per_sensor > 0 && (s.stream.min_segment_len == 0 || s.stream.max_segment_len < s.stream.min_segment_len)) {
    throw ConfigError("invalid stream segment length range");
  }
  if (s.repeat_threshold == 0 || s.rolling_window == 0) throw ConfigError("caregiver thresholds must be positive");
  validate(s.cloud.source);
  validate(s.edge.target);
  const auto& src = s.cloud.source;
  const auto& tgt = s.edge.target;
  if (src.channels != tgt.channels || src.frame_h != tgt.frame_h || src.frame_w != tgt.frame_w) {
    throw ConfigError("source and target frames differ in shape");
  }
}

inline Scenario scenario_from_json(const json& j) {
  try {
    Scenario s;
    for (const auto& n : j.at("nodes")) s.nodes.push_back({role_from_string(n.at("role")), n.value("index", std::size_t{0})});
    for (const auto& l : j.at("links")) {
      s.links.push_back({node_from_name(l.at("a")), node_from_name(l.at("b")), l.value("latency_ticks", std::uint64_t{0}),
                         l.at("bandwidth_bytes_per_tick").get<std::uint64_t>()});
    }
    if (j.contains("seeds")) {
      const auto& js = j.at("seeds");
      s.seeds = {js.value("source", s.seeds.source), js.value("target", s.seeds.target), js.value("stream", s.seeds.stream)};
    }
    if (j.contains("cloud")) s.cloud = cloud_training_config_from_json(j.at("cloud"));
    if (j.contains("edge")) s.edge = edge_fine_tune_config_from_json(j.at("edge"));
    if (j.contains("stream")) {
      const auto& js = j.at("stream");
      auto& st = s.stream;
      st.segments_per_sensor = js.value("segments_per_sensor", st.segments_per_sensor);
      st.min_segment_len = js.value("min_segment_len", st.min_segment_len);
      st.max_segment_len = js.value("max_segment_len", st.max_segment_len);
      st.frames_per_batch = js.value("frames_per_batch", st.frames_per_batch);
      st.batch_interval_ticks = js.value("batch_interval_ticks", st.batch_interval_ticks);
      st.start_tick = js.value("start_tick", st.start_tick);
    }
    if (j.contains("window")) {
      s.window.window_len = j.at("window").value("window_len", s.window.window_len);
      s.window.stride = j.at("window").value("stride", s.window.stride);
    }
    if (j.contains("category_map")) s.categories = category_map_from_json(j.at("category_map"));
    if (j.contains("caregiver")) {
      s.repeat_threshold = j.at("caregiver").value("repeat_threshold", s.repeat_threshold);
      s.rolling_window = j.at("caregiver").value("rolling_window", s.rolling_window);
    }
    if (j.contains("timing")) {
      s.timing.train_ticks = j.at("timing").value("train_ticks", s.timing.train_ticks);
      s.timing.finetune_ticks = j.at("timing").value("finetune_ticks", s.timing.finetune_ticks);
    }
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed scenario: ") + e.what());
  }
}

inline json to_json(const Scenario& s) {
  json nodes = json::array(), links = json::array(), cats = json::object();
  for (const auto& n : s.nodes) nodes.push_back({{"role", to_string(n.role)}, {"index", n.index}});
  for (const auto& l : s.links) {
    links.push_back({{"a", l.a.name()}, {"b", l.b.name()}, {"latency_ticks", l.latency_ticks},
                     {"bandwidth_bytes_per_tick", l.bandwidth_bytes_per_tick}});
  }
  for (const auto& [k, v] : s.categories.overrides) cats[k] = to_string(v);
  return {{"nodes", nodes},
          {"links", links},
          {"seeds", {{"source", s.seeds.source}, {"target", s.seeds.target}, {"stream", s.seeds.stream}}},
          {"cloud", to_json(s.cloud)},
          {"edge", to_json(s.edge)},
          {"stream",
           {{"segments_per_sensor", s.stream.segments_per_sensor},
            {"min_segment_len", s.stream.min_segment_len},
            {"max_segment_len", s.stream.max_segment_len},
            {"frames_per_batch", s.stream.frames_per_batch},
            {"batch_interval_ticks", s.stream.batch_interval_ticks},
            {"start_tick", s.stream.start_tick}}},
          {"window", {{"window_len", s.window.window_len}, {"stride", s.window.stride}}},
          {"category_map", cats},
          {"caregiver", {{"repeat_threshold", s.repeat_threshold}, {"rolling_window", s.rolling_window}}},
          {"timing", {{"train_ticks", s.timing.train_ticks}, {"finetune_ticks", s.timing.finetune_ticks}}}};
}

// One home with two sensors.
inline Scenario default_scenario() {
  Scenario s;
  const NodeId s0{Role::kSensor, 0}, s1{Role::kSensor, 1}, edge{Role::kEdge, 0}, cloud{Role::kCloud, 0},
      care{Role::kCaregiver, 0};
  s.nodes = {s0, s1, edge, cloud, care};
  s.links = {{s0, edge, 1, 4096}, {s1, edge, 1, 4096}, {edge, cloud, 5, 2048}, {edge, care, 5, 1024}, {cloud, care, 3, 4096}};
  return s;
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

enum class SimulationMode { kEdgeInference, kRawStreamingBaseline };

struct SimulationResult {
  std::vector<std::string> log;  // JSON lines, in processing order
  std::vector<Message> delivered;
  TrafficLedger ledger;
  std::optional<EvaluationReport> evaluation;
  std::optional<ModelCheckpoint> pretrained;
  std::optional<ModelCheckpoint> deployed;
  json report;
};

namespace detail {

enum class TimerKind { kCloudTrained, kFineTuned, kSensorSend };

struct Timer {
  TimerKind kind;
  NodeId node;
};

struct QueueEntry {
  std::uint64_t tick;
  std::uint64_t seq;
  std::variant<Message, Timer> item;
};

struct QueueOrder {
  bool operator()(const QueueEntry& x, const QueueEntry& y) const {
    return std::tie(x.tick, x.seq) > std::tie(y.tick, y.seq);
  }
};

struct SensorState {
  std::string stream_id;
  LabeledStream stream;
  std::size_t next_frame = 0;
};

struct InboundStream {
  std::vector<double> values;
  std::size_t frames = 0;
  bool complete = false;
  bool inferred = false;
};

class Simulator {
 public:
  Simulator(const Scenario& s, std::uint64_t seed, SimulationMode mode)
      : s_(s), seed_(seed), mode_(mode), edge_(s.with_role(Role::kEdge)[0]), cloud_(s.with_role(Role::kCloud)[0]),
        care_(s.with_role(Role::kCaregiver)[0]) {
    care_history_.repeat_threshold = s.repeat_threshold;
    care_history_.rolling_window = s.rolling_window;
    const auto& t = s.edge.target;
    frame_shape_ = {t.channels, t.frame_h, t.frame_w};
  }

  SimulationResult run() {
    std::tie(home_train_, home_holdout_) = edge_labeled_data(s_.edge, derive_seed(seed_, s_.seeds.target));
    make_sensor_streams();

    log_phase(0, "START", {{"mode", mode_name()}});
    schedule_timer(s_.timing.train_ticks, {TimerKind::kCloudTrained, cloud_});
    if (baseline()) {
      ship_labeled_data(0);
    } else {
      send(0, edge_, cloud_,
           ModelRequest{{{"node", edge_.name()}, {"target_classes", s_.edge.target.class_names()},
                         {"input", {frame_shape_[0], frame_shape_[1], frame_shape_[2]}}}});
    }
    for (const auto& [node, st] : sensors_) {
      if (st.stream.length() > 0) schedule_timer(s_.stream.start_tick, {TimerKind::kSensorSend, node});
    }

    while (!queue_.empty()) {
      QueueEntry e = queue_.top();
      queue_.pop();
      if (auto* m = std::get_if<Message>(&e.item)) {
        deliver(std::move(*m));
      } else {
        fire(std::get<Timer>(e.item), e.tick);
      }
    }
    return finish();
  }

 private:
  bool baseline() const { return mode_ == SimulationMode::kRawStreamingBaseline; }
  const char* mode_name() const { return baseline() ? "raw_streaming_baseline" : "edge_inference"; }

  void make_sensor_streams() {
    GeneratorSpec spec = s_.edge.target;
    for (const auto& node : s_.with_role(Role::kSensor)) {
      const std::uint64_t base = derive_seed(derive_seed(seed_, s_.seeds.stream), node.index);
      spec.seed = base;
      std::vector<Segment> segs;
      if (s_.stream.segments_per_sensor > 0) {
        segs = random_segments(spec.classes.size(), s_.stream.segments_per_sensor, s_.stream.min_segment_len,
                               s_.stream.max_segment_len, derive_seed(base, 1));
      }
      SensorState st;
      st.stream_id = "home0/" + node.name();
      if (segs.empty()) {
        st.stream = {Tensor({0, frame_shape_[0], frame_shape_[1], frame_shape_[2]}), {}, fingerprint(spec)};
      } else {
        st.stream = generate(spec, segs);
      }
      sensors_.emplace(node, std::move(st));
    }
  }

  // --- queue plumbing ------------------------------------------------------

  void schedule_timer(std::uint64_t tick, Timer t) { queue_.push({tick, next_seq_++, t}); }

  void send(std::uint64_t tick, const NodeId& src, const NodeId& dst, Payload payload, bool bypass = false) {
    Message m;
    m.seq = next_seq_++;
    m.src = src;
    m.dst = dst;
    m.size_bytes = serialize_payload(payload).size();
    m.payload = std::move(payload);
    m.send_tick = tick;
    const LinkSpec* link = s_.find_link(src, dst);
    if (!link) throw InvariantError("no link " + src.name() + "<->" + dst.name());
    if (!bypass) {
      const auto decision = check_boundary(m);
      if (!decision.accepted) {
        ++ledger_.rejected;
        log({{"tick", tick}, {"type", "reject"}, {"seq", m.seq}, {"kind", to_string(m.kind())}, {"src", src.name()},
             {"dst", dst.name()}, {"size_bytes", m.size_bytes}, {"reason", decision.reason}});
        return;
      }
    }
    m.delivery_tick = link->delivery_tick(tick, m.size_bytes);
    queue_.push({m.delivery_tick, m.seq, std::move(m)});
  }

  void deliver(Message m) {
    const LinkSpec* link = s_.find_link(m.src, m.dst);
    ledger_.record_delivery(m, *link);
    json entry{{"tick", m.delivery_tick}, {"type", "deliver"}, {"seq", m.seq},       {"kind", to_string(m.kind())},
               {"src", m.src.name()},     {"dst", m.dst.name()}, {"send_tick", m.send_tick}, {"size_bytes", m.size_bytes}};
    if (const auto* e = std::get_if<InferencePayload>(&m.payload)) entry["event"] = json::parse(to_json_line(e->event));
    log(entry);
    const std::uint64_t now = m.delivery_tick;
    switch (m.dst.role) {
      case Role::kEdge: on_edge(m, now); break;
      case Role::kCloud: on_cloud(m, now); break;
      case Role::kCaregiver: on_caregiver(m, now); break;
      case Role::kSensor: break;
    }
    delivered_.push_back(std::move(m));
  }

  void fire(const Timer& t, std::uint64_t now) {
    switch (t.kind) {
      case TimerKind::kCloudTrained: on_cloud_trained(now); break;
      case TimerKind::kFineTuned: on_fine_tuned(t.node, now); break;
      case TimerKind::kSensorSend: on_sensor_send(t.node, now); break;
    }
  }

  // --- sensors -------------------------------------------------------------

  void on_sensor_send(const NodeId& node, std::uint64_t now) {
    auto& st = sensors_.at(node);
    const std::size_t total = st.stream.length();
    const std::size_t end = std::min(total, st.next_frame + s_.stream.frames_per_batch);
    FrameBatch b{st.stream_id, st.next_frame, st.stream.frames.slice_rows(st.next_frame, end), {}, end == total};
    st.next_frame = end;
    send(now, node, edge_, std::move(b));
    if (end < total) schedule_timer(now + s_.stream.batch_interval_ticks, {TimerKind::kSensorSend, node});
  }

  // --- edge ----------------------------------------------------------------

  void on_edge(const Message& m, std::uint64_t now) {
    if (const auto* b = std::get_if<FrameBatch>(&m.payload)) {
      if (baseline()) {
        send(now, edge_, cloud_, *b, /*bypass=*/true);
        return;
      }
      if (buffer(*b)) try_infer(edge_, now);
    } else if (const auto* push = std::get_if<ModelPush>(&m.payload)) {
      ModelCheckpoint pre = decode_checkpoint(push->checkpoint);
      send(now, edge_, cloud_, Ack{m.seq});
      log_phase(now, "FINE_TUNE_START", {{"node", edge_.name()}});
      tune(pre);
      schedule_timer(now + s_.timing.finetune_ticks, {TimerKind::kFineTuned, edge_});
    }
  }

  // --- cloud ---------------------------------------------------------------

  void on_cloud_trained(std::uint64_t now) {
    pretrained_ = cloud_pretrain(s_.cloud, derive_seed(seed_, s_.seeds.source)).checkpoint;
    log_phase(now, "CLOUD_TRAINED", {{"node", cloud_.name()}, {"best_epoch", pretrained_->provenance.epochs}});
    for (const auto& requester : pending_requests_) push_model(requester, now);
    pending_requests_.clear();
    maybe_tune_in_cloud(now);
  }

  void push_model(const NodeId& dst, std::uint64_t now) { send(now, cloud_, dst, ModelPush{encode_checkpoint(*pretrained_)}); }

  void on_cloud(const Message& m, std::uint64_t now) {
    if (std::get_if<ModelRequest>(&m.payload)) {
      if (pretrained_) {
        push_model(m.src, now);
      } else {
        pending_requests_.push_back(m.src);
      }
    } else if (const auto* e = std::get_if<InferencePayload>(&m.payload)) {
      cloud_storage_.push_back(to_json_line(e->event));
      send(now, cloud_, m.src, Ack{m.seq});
    } else if (const auto* b = std::get_if<FrameBatch>(&m.payload)) {
      if (b->stream_id == kLabeledTrain || b->stream_id == kLabeledHoldout) {
        auto& got = b->stream_id == kLabeledTrain ? labeled_train_rx_ : labeled_holdout_rx_;
        got = b->last;
        maybe_tune_in_cloud(now);
      } else if (buffer(*b)) {
        try_infer(cloud_, now);
      }
    }
  }

  // Baseline only: the cloud tunes once it holds both the pre-trained model and
  // the home's labeled data.
  void maybe_tune_in_cloud(std::uint64_t now) {
    if (!baseline() || !pretrained_ || !labeled_train_rx_ || !labeled_holdout_rx_ || tuning_started_) return;
    tuning_started_ = true;
    log_phase(now, "FINE_TUNE_START", {{"node", cloud_.name()}});
    tune(*pretrained_);
    schedule_timer(now + s_.timing.finetune_ticks, {TimerKind::kFineTuned, cloud_});
  }

  static constexpr const char* kLabeledTrain = "home0/labeled-train";
  static constexpr const char* kLabeledHoldout = "home0/labeled-holdout";

  void ship_labeled_data(std::uint64_t now) {
    auto ship = [&](const LabeledStream& data, const char* id) {
      const std::size_t total = data.length();
      for (std::size_t first = 0; first < total; first += s_.stream.frames_per_batch) {
        const std::size_t end = std::min(total, first + s_.stream.frames_per_batch);
        FrameBatch b{id, first, data.frames.slice_rows(first, end), {}, end == total};
        for (std::size_t i = first; i < end; ++i) b.labels.push_back(static_cast<std::uint16_t>(data.labels[i]));
        send(now, edge_, cloud_, std::move(b), /*bypass=*/true);
      }
    };
    ship(home_train_, kLabeledTrain);
    ship(home_holdout_, kLabeledHoldout);
  }

  // --- fine-tuning and inference (edge, or cloud in the baseline) ---------

  void tune(const ModelCheckpoint& pre) {
    auto result = edge_fine_tune(pre, s_.edge, home_train_, home_holdout_, seed_);
    budget_ = result.budget;
    deployed_ = std::move(result.checkpoint);
  }

  void on_fine_tuned(const NodeId& node, std::uint64_t now) {
    model_ready_ = true;
    log_phase(now, "FINE_TUNE_DONE",
              {{"node", node.name()}, {"trainable", budget_.trainable}, {"total", budget_.total},
               {"best_epoch", deployed_->provenance.epochs}});
    try_infer(node, now);
  }

  // Returns true when the batch completed its stream.
  bool buffer(const FrameBatch& b) {
    auto& in = inbound_[b.stream_id];
    if (b.first_frame != in.frames) throw InvariantError("frame batch out of order for " + b.stream_id);
    in.values.insert(in.values.end(), b.frames.values().begin(), b.frames.values().end());
    in.frames += b.frames.dim(0);
    if (b.last) in.complete = true;
    return b.last;
  }

  void try_infer(const NodeId& node, std::uint64_t now) {
    if (!model_ready_) return;
    for (auto& [id, in] : inbound_) {
      if (!in.complete || in.inferred) continue;
      in.inferred = true;
      Tensor frames({in.frames, frame_shape_[0], frame_shape_[1], frame_shape_[2]}, std::move(in.values));
      in.values.clear();
      auto scores = score_frames(score_windows(deployed_->model, frames, s_.window), s_.window, in.frames);
      auto events = segment_events(scores, deployed_->label_space, s_.categories, id, now);
      frame_scores_[id] = std::move(scores);
      for (const auto& e : events) {
        send(now, node, care_, InferencePayload{e});
        if (node == edge_) send(now, node, cloud_, InferencePayload{e});
        if (node == cloud_) cloud_storage_.push_back(to_json_line(e));
      }
    }
  }

  // --- caregiver -----------------------------------------------------------

  void on_caregiver(const Message& m, std::uint64_t now) {
    const auto* e = std::get_if<InferencePayload>(&m.payload);
    if (!e) return;
    const CareAction action = caregiver_policy(e->event, care_history_);
    ++actions_[to_string(action)];
    log({{"tick", now}, {"type", "action"}, {"node", care_.name()}, {"action", to_string(action)},
         {"activity", e->event.activity}, {"category", to_string(e->event.category)}, {"stream_id", e->event.stream_id}});
    send(now, care_, m.src, Ack{m.seq});
  }

  // --- logging and results -------------------------------------------------

  void log(const json& entry) { log_.push_back(entry.dump()); }

  void log_phase(std::uint64_t tick, const char* name, json extra) {
    extra["tick"] = tick;
    extra["type"] = "phase";
    extra["phase"] = name;
    log(extra);
  }

  SimulationResult finish() {
    SimulationResult r;
    std::vector<FrameScore> all_scores;
    std::vector<std::size_t> all_labels;
    for (const auto& [node, st] : sensors_) {
      auto it = frame_scores_.find(st.stream_id);
      if (it == frame_scores_.end()) continue;
      all_scores.insert(all_scores.end(), it->second.begin(), it->second.end());
      all_labels.insert(all_labels.end(), st.stream.labels.begin(), st.stream.labels.end());
    }
    std::size_t expected = 0;
    for (const auto& [node, st] : sensors_) expected += st.stream.length();
    if (all_scores.size() != expected) throw InvariantError("not every streamed frame was scored");
    if (!all_scores.empty()) r.evaluation = evaluate(all_scores, all_labels, s_.edge.target.class_names());

    r.report = {{"mode", mode_name()},
                {"anti_pattern", baseline()},
                {"frames_streamed", expected},
                {"boundary_bytes", ledger_.boundary_bytes},
                {"events_stored_in_cloud", cloud_storage_.size()},
                {"caregiver_actions", actions_},
                {"evaluation", r.evaluation ? to_json(*r.evaluation) : json(nullptr)},
                {"budget", {{"total", budget_.total}, {"trainable", budget_.trainable}, {"frozen", budget_.frozen},
                            {"trainable_fraction", budget_.trainable_fraction}}}};
    log_phase(delivered_.empty() ? 0 : delivered_.back().delivery_tick, "END", {{"mode", mode_name()}});
    r.log = std::move(log_);
    r.delivered = std::move(delivered_);
    r.ledger = ledger_;
    r.pretrained = std::move(pretrained_);
    r.deployed = std::move(deployed_);
    return r;
  }

  const Scenario& s_;
  std::uint64_t seed_;
  SimulationMode mode_;
  NodeId edge_, cloud_, care_;
  std::array<std::size_t, 3> frame_shape_{};

  std::priority_queue<QueueEntry, std::vector<QueueEntry>, QueueOrder> queue_;
  std::uint64_t next_seq_ = 0;

  std::map<NodeId, SensorState> sensors_;
  LabeledStream home_train_, home_holdout_;
  std::map<std::string, InboundStream> inbound_;
  std::map<std::string, std::vector<FrameScore>> frame_scores_;
  std::vector<NodeId> pending_requests_;
  std::optional<ModelCheckpoint> pretrained_, deployed_;
  ParameterBudget budget_;
  bool model_ready_ = false;
  bool tuning_started_ = false;
  bool labeled_train_rx_ = false, labeled_holdout_rx_ = false;
  std::vector<std::string> cloud_storage_;
  CaregiverHistory care_history_;
  std::map<std::string, std::uint64_t> actions_;

  std::vector<std::string> log_;
  std::vector<Message> delivered_;
  TrafficLedger ledger_;
};

}  // namespace detail

// Runs the four stages: cloud pre-training, model push, on-edge fine-tuning,
// then streaming inference with events to the caregiver and cloud. The
// baseline instead ships labeled data and raw frames to the cloud.
inline SimulationResult run_simulation(const Scenario& scenario, std::uint64_t seed,
                                       SimulationMode mode = SimulationMode::kEdgeInference) {
  validate(scenario, mode == SimulationMode::kRawStreamingBaseline);
  return detail::Simulator(scenario, seed, mode).run();
}

}  // namespace edgecare
