#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "persona_guard.hpp"
#include "persona_guard/serve.hpp"

namespace pg = persona_guard;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string device = "cpu";
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "experiment config JSON")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "run seed (overrides the config)");
  cmd->add_option("--out", c.out, "experiment directory (default $PERSONA_GUARD_OUT/seed-<seed>, root ./runs)");
  cmd->add_option("--device", c.device, "compute device")->default_val("cpu");
  cmd->add_flag("--force", c.force, "accept config or artifact hash mismatches");
}

pg::Workspace open_workspace(const Common& c, bool create) {
  pg::require(c.device == "cpu", pg::ErrorCode::config, "unsupported device " + c.device + " (only cpu)");
  std::optional<pg::ExperimentConfig> base;
  if (!c.config_path.empty())
    base = pg::experiment_config_from_json(pg::json::parse(pg::read_file(c.config_path)));
  fs::path out = c.out;
  if (out.empty()) {
    const char* env = std::getenv(pg::kOutEnv);
    const auto seed = c.seed ? *c.seed : (base ? base->seed : pg::ExperimentConfig{}.seed);
    out = fs::path(env != nullptr && *env != '\0' ? env : "runs") / ("seed-" + std::to_string(seed));
  }
  if (!base && c.seed && fs::exists(out / "config.json"))
    base = pg::experiment_config_from_json(pg::json::parse(pg::read_file(out / "config.json")));
  if (c.seed) {
    if (!base) base = pg::ExperimentConfig{};
    base->seed = *c.seed;
  }
  return pg::Workspace::open(out, base, c.force, create);
}

std::vector<pg::Variant> parse_variants(const std::vector<std::string>& names) {
  std::vector<pg::Variant> out;
  for (const auto& n : names) out.push_back(pg::variant_from_string(n));
  return out;
}

std::vector<pg::Variant> all_variants(const pg::ExperimentConfig& cfg) {
  std::vector<pg::Variant> out{pg::Variant::lm};
  for (auto v : cfg.defended_variants) out.push_back(v);
  return out;
}

/// Explicit variants, else every configured variant whose `stage` ran.
std::vector<pg::Variant> pick_variants(const pg::Workspace& ws, const std::vector<std::string>& names,
                                       std::string (*stage)(pg::Variant), const std::string& what) {
  if (!names.empty()) return parse_variants(names);
  std::vector<pg::Variant> out;
  for (auto v : all_variants(ws.config()))
    if (ws.has_stage(stage(v))) out.push_back(v);
  pg::require(!out.empty(), pg::ErrorCode::stage_order, "nothing to " + what + "; run the previous stage first");
  return out;
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

void print_annotations(const pg::json& block) {
  for (const auto& a : block) {
    const auto& top = a.at("top1");
    std::cout << "    [" << a.at("model").get<std::string>() << "] " << top.at("persona").get<std::string>() << " (p="
              << pg::detail::fixed(top.at("prob").get<double>(), 3) << ")\n";
  }
}

struct ServeArgs {
  std::string lm_ckpt, defended_ckpt, persist, host = "0.0.0.0", context;
  std::vector<std::string> attacker_ckpts;
  int port = 8080;
  std::string defended_variant = "LM+KL+MI";
};

/// Models for chat and serve: flags win, otherwise the experiment layout.
std::vector<pg::AnnotatedModel> load_pair(const ServeArgs& a, const Common& c, std::map<std::string, pg::Conversation>& contexts) {
  const auto dv = pg::variant_from_string(a.defended_variant);
  std::string lm = a.lm_ckpt, def = a.defended_ckpt, lm_att, def_att;
  if (a.attacker_ckpts.size() >= 1) lm_att = a.attacker_ckpts[0];
  if (a.attacker_ckpts.size() >= 2) def_att = a.attacker_ckpts[1];
  const bool need_ws = lm.empty() || def.empty() || lm_att.empty() || def_att.empty();
  if (need_ws) {
    const auto ws = open_workspace(c, false);
    if (lm.empty()) lm = ws.path(pg::model_rel(pg::Variant::lm)).string();
    if (def.empty()) def = ws.path(pg::model_rel(dv)).string();
    if (lm_att.empty()) lm_att = ws.path(pg::attacker_rel(pg::Variant::lm)).string();
    if (def_att.empty()) def_att = ws.path(pg::attacker_rel(dv)).string();
    if (fs::exists(ws.path("data/test.jsonl"))) contexts = pg::canned_contexts(pg::detail::load_split(ws, "test"));
  }
  std::vector<pg::AnnotatedModel> models;
  models.push_back(pg::load_annotated_model("LM", lm, lm_att));
  models.push_back(pg::load_annotated_model(a.defended_variant, def, def_att));
  return models;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Persona leakage lab: black-box persona inference attacks on chatbots and the KL/MI defense"};
  app.require_subcommand(1);
  Common c;
  std::vector<std::string> variants;
  int k = 8;
  std::string embedder = "bow";
  ServeArgs sa;

  auto* synth = app.add_subcommand("synth", "build or ingest the corpus, split it and fix the vocabulary");
  auto* train_lm = app.add_subcommand("train-lm", "train the undefended language model");
  auto* train_def = app.add_subcommand("train-defended", "train defended models (KL and/or MI objectives)");
  auto* attack = app.add_subcommand("attack", "black-box persona inference attack on frozen checkpoints");
  auto* eval = app.add_subcommand("eval", "privacy and utility reports for attacked models");
  auto* unseen = app.add_subcommand("unseen", "defense against labels the defender never saw");
  auto* cluster = app.add_subcommand("cluster", "k-means clustering of persona sentences");
  auto* report = app.add_subcommand("report", "collect evaluated models into report.json and report.md");
  auto* run = app.add_subcommand("run", "synth, train, attack, eval and report in one go");
  auto* chat = app.add_subcommand("chat", "terminal chat with attacker predictions per utterance");
  auto* serve = app.add_subcommand("serve", "HTTP chat service with attacker annotations");

  for (auto* cmd : {synth, train_lm, train_def, attack, eval, unseen, cluster, report, run, chat, serve}) add_common(cmd, c);
  for (auto* cmd : {train_def, attack, eval, unseen})
    cmd->add_option("--variant", variants, "model variants (LM, LM+KL, LM+MI, LM+KL+MI)");
  cluster->add_option("--k", k, "number of clusters")->check(CLI::PositiveNumber);
  cluster->add_option("--embedder", embedder, "sentence embedder")->check(CLI::IsMember({"bow", "lm"}));
  for (auto* cmd : {chat, serve}) {
    cmd->add_option("--lm-checkpoint", sa.lm_ckpt, "undefended chatbot checkpoint");
    cmd->add_option("--defended-checkpoint", sa.defended_ckpt, "defended chatbot checkpoint");
    cmd->add_option("--attacker-checkpoint", sa.attacker_ckpts,
                    "attacker checkpoints: undefended first, defended second")
        ->expected(0, 2);
    cmd->add_option("--defended-variant", sa.defended_variant, "name of the defended variant");
  }
  chat->add_option("--context", sa.context, "canned context id (a test dialog id)");
  serve->add_option("--port", sa.port, "listen port");
  serve->add_option("--host", sa.host, "listen address");
  serve->add_option("--persist", sa.persist, "directory for per-session JSONL logs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: E_CONFIG: " << e.what() << '\n';
    return pg::exit_status(pg::ErrorCode::config);
  }

  try {
    if (synth->parsed()) {
      pg::stage_synth(open_workspace(c, true), log_line);
    } else if (train_lm->parsed()) {
      pg::stage_train(open_workspace(c, false), pg::Variant::lm, log_line);
    } else if (train_def->parsed()) {
      const auto ws = open_workspace(c, false);
      const auto vs = variants.empty() ? ws.config().defended_variants : parse_variants(variants);
      for (auto v : vs) {
        pg::require(v != pg::Variant::lm, pg::ErrorCode::config, "LM is trained by train-lm");
        pg::stage_train(ws, v, log_line);
      }
    } else if (attack->parsed()) {
      const auto ws = open_workspace(c, false);
      for (auto v : pick_variants(ws, variants, pg::train_stage, "attack")) pg::stage_attack(ws, v, log_line);
    } else if (eval->parsed()) {
      const auto ws = open_workspace(c, false);
      for (auto v : pick_variants(ws, variants, pg::attack_stage, "eval")) {
        const auto r = pg::stage_eval(ws, v, log_line);
        std::cout << pg::json{{"model", r.name}, {"privacy", pg::to_json(r.privacy)}, {"utility", pg::to_json(*r.utility)}}.dump()
                  << '\n';
      }
    } else if (unseen->parsed()) {
      const auto ws = open_workspace(c, false);
      const auto vs = variants.empty() ? ws.config().defended_variants : parse_variants(variants);
      for (auto v : vs) std::cout << pg::stage_unseen(ws, v, log_line).dump() << '\n';
    } else if (cluster->parsed()) {
      const auto ws = open_workspace(c, false);
      pg::stage_cluster(ws, k, embedder == "lm" ? pg::EmbedderKind::lm : pg::EmbedderKind::bow, log_line);
    } else if (report->parsed()) {
      const auto ws = open_workspace(c, false);
      pg::stage_report(ws, log_line);
      std::cout << pg::read_file(ws.path("report.md"));
    } else if (run->parsed()) {
      const auto ws = open_workspace(c, true);
      pg::stage_synth(ws, log_line);
      for (auto v : all_variants(ws.config())) pg::stage_train(ws, v, log_line);
      for (auto v : all_variants(ws.config())) pg::stage_attack(ws, v, log_line);
      for (auto v : all_variants(ws.config())) pg::stage_eval(ws, v, log_line);
      pg::stage_report(ws, log_line);
      std::cout << pg::read_file(ws.path("report.md"));
    } else if (chat->parsed()) {
      std::map<std::string, pg::Conversation> contexts;
      auto models = load_pair(sa, c, contexts);
      pg::ChatService service(std::move(models), contexts, {}, 1);
      const auto session = service.create_session(sa.context.empty() ? std::nullopt : std::optional(sa.context));
      const auto id = session.at("session_id").get<std::string>();
      for (const auto& t : session.at("transcript")) {
        std::cout << t.at("speaker").get<std::string>() << ": " << t.at("text").get<std::string>() << '\n';
        print_annotations(t.at("annotations"));
      }
      std::cout << "type a message, empty line or EOF to quit\n> " << std::flush;
      std::string line;
      while (std::getline(std::cin, line) && !pg::detail::blank(line)) {
        const auto r = service.post_message(id, line);
        print_annotations(r.at("annotations_user_turn"));
        std::cout << "bot: " << r.at("reply").get<std::string>() << '\n';
        print_annotations(r.at("annotations_bot_turn"));
        std::cout << "> " << std::flush;
      }
    } else if (serve->parsed()) {
      std::map<std::string, pg::Conversation> contexts;
      auto models = load_pair(sa, c, contexts);
      std::optional<fs::path> persist;
      if (!sa.persist.empty()) persist = sa.persist;
      pg::ChatService service(std::move(models), contexts, {}, 1, persist);
      auto server = pg::make_http_server(service);
      std::cerr << "listening on " << sa.host << ":" << sa.port << '\n';
      pg::require(server->listen(sa.host, sa.port), pg::ErrorCode::io,
                  "cannot listen on " + sa.host + ":" + std::to_string(sa.port));
    }
  } catch (const pg::Error& e) {
    std::cerr << "error: " << pg::to_string(e.code()) << ": " << e.what() << '\n';
    return pg::exit_status(e.code());
  } catch (const pg::json::exception& e) {
    std::cerr << "error: E_PARSE: " << e.what() << '\n';
    return pg::exit_status(pg::ErrorCode::parse);
  } catch (const std::exception& e) {
    std::cerr << "error: E_IO: " << e.what() << '\n';
    return pg::exit_status(pg::ErrorCode::io);
  }
  return 0;
}
