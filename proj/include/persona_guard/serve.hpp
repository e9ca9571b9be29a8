#pragma once

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "httplib.h"
#include "persona_guard/attack.hpp"
#include "persona_guard/checkpoint.hpp"

namespace persona_guard {

/// A chatbot and the attacker trained against its embeddings.
struct AnnotatedModel {
  std::string name;
  ChatbotModel<float> chatbot;
  AttackerModel<float> attacker;
  PersonaCatalog catalog;
};

inline AnnotatedModel load_annotated_model(std::string name, const fs::path& chatbot_ckpt, const fs::path& attacker_ckpt) {
  auto chatbot = load_chatbot<float>(chatbot_ckpt).model;
  auto attacker = load_classifier<float>(attacker_ckpt);
  require(attacker.model.input_dim() == chatbot.config().model_dim, ErrorCode::dimension,
          "attacker " + attacker_ckpt.string() + " does not match chatbot width");
  return {std::move(name), std::move(chatbot), std::move(attacker.model), std::move(attacker.catalog)};
}

struct PersonaGuess {
  int persona_id = 0;
  std::string persona;
  double prob = 0.0;
};

struct AttackAnnotation {
  std::string model;
  std::vector<PersonaGuess> top5;  // top5.front() is the top-1 guess
};

inline json to_json(const PersonaGuess& g) { return {{"persona_id", g.persona_id}, {"persona", g.persona}, {"prob", g.prob}}; }

inline json to_json(const AttackAnnotation& a) {
  json top = json::array();
  for (const auto& g : a.top5) top.push_back(to_json(g));
  return {{"model", a.model}, {"top1", to_json(a.top5.front())}, {"top5", top}};
}

/// Attacker view of turn `index` of `conv`, queried black-box.
inline AttackAnnotation annotate_turn(const AnnotatedModel& m, const Conversation& conv, std::size_t index) {
  const auto emb = dialog_embeddings(m.chatbot, conv)[index];
  const auto p = m.attacker.predict(std::span<const float>(emb));
  const Distribution dist(p.begin(), p.end());
  AttackAnnotation a;
  a.model = m.name;
  const int k = std::min(5, static_cast<int>(dist.size()));
  for (int id : top_k_labels(dist, k)) {
    const auto text = m.catalog.contains(id) ? m.catalog.entries[static_cast<std::size_t>(id)] : std::string();
    a.top5.push_back({id, text, dist[static_cast<std::size_t>(id)]});
  }
  return a;
}

struct ChatSession {
  std::string id;
  std::string context_id;
  Conversation transcript;
  std::vector<std::vector<AttackAnnotation>> annotations;  // one block per turn
  int messages = 0;
  std::mutex mutex;
};

/// Canned opening contexts: the first `turns` utterances of up to `count`
/// dialogs, keyed by dialog id.
inline std::map<std::string, Conversation> canned_contexts(const AlignedCorpus& corpus, std::size_t count = 8,
                                                           std::size_t turns = 4) {
  std::map<std::string, Conversation> out;
  for (std::size_t i = 0; i < corpus.conversations.size() && out.size() < count; ++i) {
    const auto& c = corpus.conversations[i];
    if (c.turns.size() < turns) continue;
    Conversation ctx{c.dialog_id, {c.turns.begin(), c.turns.begin() + static_cast<std::ptrdiff_t>(turns)}};
    for (auto& t : ctx.turns) t.persona_id = kUnlabeled;
    out.emplace(c.dialog_id, std::move(ctx));
  }
  return out;
}

/// Session-scoped chat with per-turn attack annotations from every loaded
/// model. Models are shared read-only; each session has its own lock.
class ChatService {
 public:
  /// `responder` is the index of the model that writes the bot replies.
  ChatService(std::vector<AnnotatedModel> models, std::map<std::string, Conversation> contexts,
              GenerationSettings generation = {}, std::size_t responder = 0,
              std::optional<fs::path> persist_dir = std::nullopt, std::uint64_t seed = 0)
      : models_(std::move(models)),
        contexts_(std::move(contexts)),
        generation_(generation),
        responder_(responder),
        persist_dir_(std::move(persist_dir)),
        seed_(seed) {
    require(!models_.empty(), ErrorCode::config, "chat service needs at least one model");
    require(responder_ < models_.size(), ErrorCode::config, "responder index out of range");
  }

  const std::vector<AnnotatedModel>& models() const { return models_; }

  json models_json() const {
    json out = json::array();
    for (std::size_t i = 0; i < models_.size(); ++i) {
      const auto& m = models_[i];
      out.push_back({{"name", m.name},
                     {"responder", i == responder_},
                     {"num_personas", m.catalog.size()},
                     {"model_dim", m.chatbot.config().model_dim},
                     {"checksum", hex64(m.chatbot.checksum())}});
    }
    json ctx = json::array();
    for (const auto& [id, _] : contexts_) ctx.push_back(id);
    return {{"models", out}, {"contexts", ctx}};
  }

  json create_session(const std::optional<std::string>& context_id = std::nullopt) {
    auto s = std::make_shared<ChatSession>();
    if (context_id && !context_id->empty()) {
      const auto it = contexts_.find(*context_id);
      require(it != contexts_.end(), ErrorCode::not_found, "unknown context " + *context_id);
      s->context_id = *context_id;
      s->transcript = it->second;
    }
    s->id = hex64(derive_seed(seed_, "session:" + std::to_string(next_id_.fetch_add(1))));
    s->transcript.dialog_id = s->id;
    for (std::size_t i = 0; i < s->transcript.turns.size(); ++i) s->annotations.push_back(annotate(s->transcript, i));
    {
      std::unique_lock lock(sessions_mutex_);
      sessions_[s->id] = s;
    }
    std::lock_guard guard(s->mutex);
    for (std::size_t i = 0; i < s->transcript.turns.size(); ++i) persist(*s, i);
    return snapshot(*s);
  }

  json post_message(const std::string& session_id, const std::string& text) {
    require(!detail::blank(text), ErrorCode::bad_request, "message text is empty");
    const auto s = find(session_id);
    std::lock_guard guard(s->mutex);
    Utterance user{Speaker::A, text, kUnlabeled};
    if (!s->transcript.turns.empty() && s->transcript.turns.back().speaker == Speaker::A) user.speaker = Speaker::B;
    s->transcript.turns.push_back(user);
    s->annotations.push_back(annotate(s->transcript, s->transcript.turns.size() - 1));
    persist(*s, s->transcript.turns.size() - 1);

    auto settings = generation_;
    settings.seed = derive_seed(fnv1a(s->id), "reply:" + std::to_string(s->messages));
    auto reply = generate(models_[responder_].chatbot, s->transcript, settings);
    reply.persona_id = kUnlabeled;
    s->transcript.turns.push_back(reply);
    s->annotations.push_back(annotate(s->transcript, s->transcript.turns.size() - 1));
    persist(*s, s->transcript.turns.size() - 1);
    ++s->messages;

    const auto n = s->transcript.turns.size();
    return {{"session_id", s->id},
            {"reply", reply.text},
            {"annotations_user_turn", block_json(s->annotations[n - 2])},
            {"annotations_bot_turn", block_json(s->annotations[n - 1])}};
  }

  json get_session(const std::string& session_id) const {
    const auto s = find(session_id);
    std::lock_guard guard(s->mutex);
    return snapshot(*s);
  }

 private:
  std::shared_ptr<ChatSession> find(const std::string& id) const {
    std::shared_lock lock(sessions_mutex_);
    const auto it = sessions_.find(id);
    require(it != sessions_.end(), ErrorCode::not_found, "unknown session " + id);
    return it->second;
  }

  std::vector<AttackAnnotation> annotate(const Conversation& conv, std::size_t index) const {
    std::vector<AttackAnnotation> out;
    for (const auto& m : models_) out.push_back(annotate_turn(m, conv, index));
    return out;
  }

  static json block_json(const std::vector<AttackAnnotation>& block) {
    json out = json::array();
    for (const auto& a : block) out.push_back(to_json(a));
    return out;
  }

  static json turn_json(const ChatSession& s, std::size_t i) {
    const auto& t = s.transcript.turns[i];
    return {{"index", i}, {"speaker", std::string(to_string(t.speaker))}, {"text", t.text},
            {"annotations", block_json(s.annotations[i])}};
  }

  static json snapshot(const ChatSession& s) {
    json turns = json::array();
    for (std::size_t i = 0; i < s.transcript.turns.size(); ++i) turns.push_back(turn_json(s, i));
    return {{"session_id", s.id}, {"context_id", s.context_id}, {"messages", s.messages}, {"transcript", turns}};
  }

  void persist(const ChatSession& s, std::size_t i) const {
    if (!persist_dir_) return;
    fs::create_directories(*persist_dir_);
    std::ofstream out(*persist_dir_ / (s.id + ".jsonl"), std::ios::app);
    require(out.good(), ErrorCode::io, "cannot append to session log of " + s.id);
    out << turn_json(s, i).dump() << '\n';
  }

  std::vector<AnnotatedModel> models_;
  std::map<std::string, Conversation> contexts_;
  GenerationSettings generation_;
  std::size_t responder_ = 0;
  std::optional<fs::path> persist_dir_;
  std::uint64_t seed_ = 0;
  std::atomic<std::uint64_t> next_id_{0};
  mutable std::shared_mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<ChatSession>> sessions_;
};

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::not_found: return 404;
    case ErrorCode::bad_request:
    case ErrorCode::parse: return 400;
    default: return 500;
  }
}

/// JSON-over-HTTP routes for a chat service. CORS is open to any origin.
inline std::unique_ptr<httplib::Server> make_http_server(ChatService& service) {
  auto server = std::make_unique<httplib::Server>();
  server->set_default_headers({{"Access-Control-Allow-Origin", "*"},
                               {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                               {"Access-Control-Allow-Headers", "Content-Type"}});
  const auto reply = [](httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  };
  const auto guarded = [reply](auto&& handler) {
    return [reply, handler](const httplib::Request& req, httplib::Response& res) {
      try {
        handler(req, res);
      } catch (const Error& e) {
        reply(res, http_status(e.code()), {{"error", std::string(to_string(e.code()))}, {"message", e.what()}});
      } catch (const json::exception& e) {
        reply(res, 400, {{"error", "E_BAD_REQUEST"}, {"message", e.what()}});
      }
    };
  };
  const auto body_of = [](const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    try {
      return json::parse(req.body);
    } catch (const json::exception& e) {
      fail(ErrorCode::bad_request, std::string("invalid JSON body: ") + e.what());
    }
  };

  server->Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server->Get("/models", guarded([&service, reply](const httplib::Request&, httplib::Response& res) {
                reply(res, 200, service.models_json());
              }));
  server->Post("/sessions", guarded([&service, reply, body_of](const httplib::Request& req, httplib::Response& res) {
                 const auto body = body_of(req);
                 std::optional<std::string> ctx;
                 if (body.contains("context_id") && !body["context_id"].is_null())
                   ctx = body["context_id"].get<std::string>();
                 reply(res, 201, service.create_session(ctx));
               }));
  server->Get(R"(/sessions/([0-9a-f]+))",
              guarded([&service, reply](const httplib::Request& req, httplib::Response& res) {
                reply(res, 200, service.get_session(req.matches[1]));
              }));
  server->Post(R"(/sessions/([0-9a-f]+)/message)",
               guarded([&service, reply, body_of](const httplib::Request& req, httplib::Response& res) {
                 const auto body = body_of(req);
                 require(body.contains("text") && body["text"].is_string(), ErrorCode::bad_request,
                         "body needs a text field");
                 reply(res, 200, service.post_message(req.matches[1], body["text"].get<std::string>()));
               }));
  return server;
}

}  // namespace persona_guard
