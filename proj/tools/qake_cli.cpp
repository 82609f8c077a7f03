#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qake/adversary.hpp"
#include "qake/error_correction.hpp"
#include "qake/errors.hpp"
#include "qake/finite_key.hpp"
#include "qake/hashing.hpp"
#include "qake/keyrate.hpp"
#include "qake/parallel.hpp"
#include "qake/protocol.hpp"
#include "qake/quantum_channel.hpp"

namespace {

using namespace qake;

// Reads "key=value" lines; blank lines and lines starting with '#' are skipped.
std::vector<std::pair<std::string, std::string>> read_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw CLI::FileError::Missing(path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CLI::ConversionError(path + ":" + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw CLI::ConversionError(path + ":" + std::to_string(lineno) + ": empty key");
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

// Expands --config into flags placed ahead of the command line ones, skipping
// keys the command line already sets, so flags override the file.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::optional<std::string> path;
  std::size_t sub_pos = args.size();
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (sub_pos == args.size() && !args[i].empty() && args[i][0] != '-') sub_pos = i;
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (!path) return args;
  auto given = [&](const std::string& key) {
    for (const auto& a : args)
      if (a == "--" + key || a.rfind("--" + key + "=", 0) == 0) return true;
    return false;
  };
  std::vector<std::string> extra;
  for (const auto& [k, v] : read_config(*path))
    if (!given(k)) extra.push_back("--" + k + "=" + v);
  const std::size_t at = sub_pos < args.size() ? sub_pos + 1 : args.size();
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(at), extra.begin(), extra.end());
  return args;
}

// Output sink: the named file, or stdout.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty()) {
      file_.open(path, std::ios::binary);
      if (!file_) throw ConfigError("cannot open " + path + " for writing");
    }
  }
  std::ostream& stream() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

 private:
  std::ofstream file_;
};

struct LossRange {
  double from = 0, to = 0, step = 1;
};

LossRange parse_loss_range(const std::string& s) {
  std::vector<double> parts;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ':')) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != tok.size()) throw CLI::ValidationError("--loss-db-range", "bad number '" + tok + "'");
    parts.push_back(v);
  }
  if (parts.size() != 3 || parts[0] < 0 || parts[1] < parts[0] || !(parts[2] > 0))
    throw CLI::ValidationError("--loss-db-range", "expected from:to:step with 0 <= from <= to and step > 0");
  return {parts[0], parts[1], parts[2]};
}

std::string hex_or_dash(const std::optional<BitString>& k) { return k ? to_hex(k->to_bytes()) : "-"; }

const char* decision(Decision d) { return d == Decision::unset ? "unset" : (d == Decision::one ? "1" : "0"); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Authenticated quantum key exchange simulator"};
  app.require_subcommand(1);
  std::string config_path;
  auto add_config = [&](CLI::App* s) { s->add_option("--config", config_path, "Flat key=value file; flags override it"); };

  // simulate
  auto* sim = app.add_subcommand("simulate", "Simulate the raw data of one session");
  std::size_t sim_n = 0;
  double sim_loss = 0, sim_qber = 0.02, sim_dark = 0;
  std::uint64_t sim_seed = 1;
  std::string sim_out;
  sim->add_option("--n", sim_n, "Number of pulses")->required()->check(CLI::Range(std::size_t{1}, std::size_t{1} << 32));
  sim->add_option("--loss-db", sim_loss, "Channel loss in dB")->check(CLI::Range(0.0, 300.0));
  sim->add_option("--qber", sim_qber, "Intrinsic error rate")->check(CLI::Range(0.0, 0.5));
  sim->add_option("--dark", sim_dark, "Dark count probability per pulse")->check(CLI::Range(0.0, 1.0));
  sim->add_option("--seed", sim_seed, "Random seed");
  sim->add_option("--out", sim_out, "Output file (default stdout)");
  add_config(sim);

  // run-session
  auto* rs = app.add_subcommand("run-session", "Run one authenticated session");
  std::string rs_variant = "qake", rs_secrets, rs_raw, rs_transcript, rs_out;
  std::size_t rs_n = 0, rs_tag = 80, rs_key = 32;
  double rs_loss = 0, rs_qber = 0.02, rs_f = 0.5;
  std::uint64_t rs_seed = 1;
  std::uint32_t rs_label_a = 1, rs_label_b = 1, rs_masks = 64;
  rs->add_option("--variant", rs_variant, "qake or prng")->check(CLI::IsMember({"qake", "prng"}));
  rs->add_option("--n", rs_n, "Number of pulses")->required()->check(CLI::Range(std::size_t{1000}, std::size_t{1} << 24));
  rs->add_option("--loss-db", rs_loss, "Channel loss in dB")->check(CLI::Range(0.0, 60.0));
  rs->add_option("--qber", rs_qber, "Intrinsic error rate")->check(CLI::Range(0.0, 0.5));
  rs->add_option("--tag-bits", rs_tag, "Tag length of both validation tags")->check(CLI::Range(1, 1024));
  rs->add_option("--key-bits", rs_key, "Output key length")->check(CLI::Range(1, 1 << 20));
  rs->add_option("--f-p1", rs_f, "Test fraction")->check(CLI::Range(0.01, 0.99));
  rs->add_option("--seed", rs_seed, "Random seed");
  rs->add_option("--label-a", rs_label_a, "Alice's label")->check(CLI::Range(1u, 0xfffffffeu));
  rs->add_option("--label-b", rs_label_b, "Bob's label")->check(CLI::Range(1u, 0xfffffffeu));
  rs->add_option("--mask-keys", rs_masks, "Mask keys generated for new secrets")->check(CLI::Range(1u, 1u << 20));
  rs->add_option("--secrets-file", rs_secrets, "Shared secrets; created from the seed when absent, updated after the run");
  rs->add_option("--raw", rs_raw, "Recorded raw data to use instead of simulating (plain variant)");
  rs->add_option("--transcript", rs_transcript, "Write the message transcript here");
  rs->add_option("--out", rs_out, "Summary output file (default stdout)");
  add_config(rs);

  // attack
  auto* at = app.add_subcommand("attack", "Monte-Carlo trials of an attack strategy");
  std::string at_strategy, at_variant = "qake", at_out;
  std::uint64_t at_trials = 1000, at_seed = 1;
  std::size_t at_tag = 8, at_n = 0;
  double at_loss = 0, at_qber = 0.02, at_f = 0.5, at_rob = 0.05;
  at->add_option("--strategy", at_strategy,
                 "passive | replay-tag | impersonate-alice | impersonate-bob | desync-labels[:k] | drop:<Kind> | "
                 "tamper:<Kind>[:bit]")
      ->required();
  at->add_option("--trials", at_trials, "Number of independent sessions")->check(CLI::Range(std::uint64_t{1}, std::uint64_t{100000000}));
  at->add_option("--tag-bits", at_tag, "Tag length")->check(CLI::Range(1, 64));
  at->add_option("--seed", at_seed, "Random seed");
  at->add_option("--variant", at_variant, "qake or prng")->check(CLI::IsMember({"qake", "prng"}));
  at->add_option("--n", at_n, "Pulses per session (default 30000 plain, 20000 generator)")
      ->check(CLI::Range(std::size_t{1000}, std::size_t{1} << 22));
  at->add_option("--loss-db", at_loss, "Channel loss in dB")->check(CLI::Range(0.0, 60.0));
  at->add_option("--qber", at_qber, "Intrinsic error rate")->check(CLI::Range(0.0, 0.5));
  at->add_option("--f-p1", at_f, "Test fraction")->check(CLI::Range(0.01, 0.99));
  at->add_option("--robustness-bound", at_rob, "Bound compared with honest failures")->check(CLI::Range(0.0, 1.0));
  at->add_option("--out", at_out, "CSV output file (default stdout)");
  add_config(at);

  // keyrate
  auto* kr = app.add_subcommand("keyrate", "Optimised finite-key length");
  std::string kr_variant = "qake", kr_leak = "fraction", kr_range, kr_out, kr_report, kr_method = "kato";
  double kr_n = 0, kr_qber = 0.02, kr_eps_sec = 1e-15, kr_eps_rob = 1e-10, kr_leak_fraction = 0.30, kr_f_ec = 1.16;
  double kr_tag = 80, kr_l_theta = 256, kr_dark = 0;
  std::optional<double> kr_p_det, kr_f_p1, kr_p_x, kr_loss;
  kr->add_option("--variant", kr_variant, "qake | prng | bb84_standard | bb84_unbalanced")
      ->check(CLI::IsMember({"qake", "prng", "bb84_standard", "bb84", "bb84_unbalanced"}));
  kr->add_option("--n", kr_n, "Number of pulses")->required()->check(CLI::Range(1e3, 1e16));
  kr->add_option("--p-det", kr_p_det, "Overall click probability per pulse (replaces the loss)")->check(CLI::Range(1e-12, 0.5));
  kr->add_option("--loss-db", kr_loss, "Single loss value in dB")->check(CLI::Range(0.0, 100.0));
  kr->add_option("--loss-db-range", kr_range, "Sweep from:to:step in dB");
  kr->add_option("--qber", kr_qber, "Intrinsic error rate")->check(CLI::Range(0.0, 0.5));
  kr->add_option("--dark", kr_dark, "Dark count probability per pulse")->check(CLI::Range(0.0, 0.1));
  kr->add_option("--eps-sec", kr_eps_sec, "Security target")->check(CLI::Range(1e-300, 0.5));
  kr->add_option("--eps-rob", kr_eps_rob, "Robustness target")->check(CLI::Range(1e-300, 0.5));
  kr->add_option("--leak-mode", kr_leak, "fraction or formula")->check(CLI::IsMember({"fraction", "formula"}));
  kr->add_option("--leak-fraction", kr_leak_fraction, "Leaked fraction of the key set")->check(CLI::Range(0.0, 1.0));
  kr->add_option("--f-ec", kr_f_ec, "Reconciliation efficiency")->check(CLI::Range(1.0, 10.0));
  kr->add_option("--tag-bits", kr_tag, "Tag length of both validation tags")->check(CLI::Range(1.0, 1024.0));
  kr->add_option("--f-p1", kr_f_p1, "Fixed test fraction (optimised when absent)")->check(CLI::Range(0.01, 0.99));
  kr->add_option("--p-x", kr_p_x, "Basis bias of the unbalanced variant")->check(CLI::Range(0.01, 0.99));
  kr->add_option("--l-theta", kr_l_theta, "Seed length of the generator variant")->check(CLI::Range(128.0, 4096.0));
  kr->add_option("--method", kr_method, "kato or hoeffding")->check(CLI::IsMember({"kato", "hoeffding"}));
  kr->add_option("--out", kr_out, "CSV output file (default stdout)");
  kr->add_option("--report", kr_report, "Write key=value report and thresholds of the last point here");
  add_config(kr);

  // ec-bench
  auto* ec = app.add_subcommand("ec-bench", "Error-correction benchmark on random blocks");
  double ec_ber = 0.02;
  std::uint64_t ec_trials = 100, ec_seed = 1;
  std::string ec_out;
  ec->add_option("--ber", ec_ber, "Bit error rate")->check(CLI::Range(0.0, 0.5));
  ec->add_option("--trials", ec_trials, "Number of blocks")->check(CLI::Range(std::uint64_t{1}, std::uint64_t{10000000}));
  ec->add_option("--seed", ec_seed, "Random seed");
  ec->add_option("--out", ec_out, "CSV output file (default stdout)");
  add_config(ec);

  // hash-test
  auto* ht = app.add_subcommand("hash-test", "Evaluate or generate Toeplitz seeds in the wire format");
  std::string ht_seed_hex, ht_msg_hex, ht_mask_hex, ht_gen, ht_out;
  std::uint64_t ht_seed = 1;
  ht->add_option("--seed-hex", ht_seed_hex, "Serialized Toeplitz seed (hex)");
  ht->add_option("--msg-hex", ht_msg_hex, "Serialized message bit string (hex)");
  ht->add_option("--mask-hex", ht_mask_hex, "Serialized mask bit string (hex); the tag is masked when given");
  ht->add_option("--gen", ht_gen, "Generate a random seed of shape out:msg instead");
  ht->add_option("--seed", ht_seed, "Random seed for --gen");
  ht->add_option("--out", ht_out, "Output file (default stdout)");
  add_config(ht);

  try {
    std::vector<std::string> args = expand_config(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Error& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*sim) {
      ChannelConfig ch = ChannelConfig::from_loss_db(sim_loss, sim_qber);
      ch.dark_count_prob = sim_dark;
      const auto raw = simulate_session(SourceConfig{}, ch, sim_n, sim_seed);
      Output out(sim_out);
      save_raw_data(raw, out.stream());
    } else if (*rs) {
      const ProtocolVariant v = parse_protocol_variant(rs_variant);
      SessionConfig cfg = make_session_config(v, rs_n, rs_loss, rs_qber, rs_tag, rs_key, rs_f);
      SharedSecrets secrets;
      const bool have_file = !rs_secrets.empty() && std::filesystem::exists(rs_secrets);
      if (have_file) {
        secrets = SharedSecrets::load(rs_secrets);
        const SecretsConfig want = cfg.secrets_config(static_cast<std::uint32_t>(secrets.mask_keys.size()));
        if (secrets.k1_hash.out_len != want.tag_av_bits || secrets.k1_hash.msg_len != want.h1_capacity ||
            secrets.k2.out_len != want.tag_bv_bits || secrets.k2.msg_len != want.h2_capacity ||
            secrets.pa_seed.out_len != want.pa_out || secrets.pa_seed.msg_len != want.pa_capacity ||
            secrets.basis_seeds.size() != (want.l_theta ? secrets.mask_keys.size() : 0))
          throw ConfigError("secrets file does not fit this session's parameters");
      } else {
        Rng rng(derive_seed(rs_seed, 7));
        secrets = SharedSecrets::generate(cfg.secrets_config(rs_masks), rng);
      }
      std::optional<RawSessionData> raw;
      if (!rs_raw.empty()) raw = load_raw_data(rs_raw);
      PartyState alice = PartyState::make(Role::alice, secrets, rs_label_a);
      PartyState bob = PartyState::make(Role::bob, secrets, rs_label_b);
      const SessionOutcome o = run_session(cfg, alice, bob, rs_seed, nullptr, raw ? &*raw : nullptr);
      if (!rs_secrets.empty()) {
        // Both parties hold the same secrets after an accepted round.
        const SharedSecrets& keep = o.f_a == Outcome::one ? alice.secrets : (o.f_b == Outcome::one ? bob.secrets : secrets);
        if (!have_file || !(keep == secrets)) keep.save(rs_secrets);
      }
      if (!rs_transcript.empty()) {
        Output t(rs_transcript);
        t.stream() << dump_transcript(o);
      }
      Output out(rs_out);
      auto& os = out.stream();
      os << "variant=" << rs_variant << '\n'
         << "f_a=" << to_string(o.f_a) << '\n'
         << "f_b=" << to_string(o.f_b) << '\n'
         << "d_pe=" << decision(o.d_pe) << '\n'
         << "d_av=" << decision(o.d_av) << '\n'
         << "d_bv=" << decision(o.d_bv) << '\n'
         << "key_a=" << hex_or_dash(o.k_a) << '\n'
         << "key_b=" << hex_or_dash(o.k_b) << '\n'
         << "label_a=" << o.label_a << '\n'
         << "label_b=" << o.label_b << '\n'
         << "structural_failure=" << (o.structural_failure ? 1 : 0) << '\n'
         << "ec_blocks=" << o.ec_blocks << '\n'
         << "ec_blocks_accepted=" << o.ec_blocks_accepted << '\n';
      if (o.observed) {
        os << "sift_size=" << format_double(o.observed->sift_size) << '\n'
           << "test_size=" << format_double(o.observed->test.size()) << '\n'
           << "key_set_size=" << format_double(o.observed->key.size()) << '\n';
      }
      if (o.estimates) {
        os << "n1_p2_lb=" << format_double(o.estimates->n1_p2) << '\n'
           << "n1_p1_lb=" << format_double(o.estimates->n1_p1) << '\n'
           << "e1_ub=" << format_double(o.estimates->e1_ub) << '\n'
           << "ebit=" << format_double(o.estimates->ebit) << '\n';
      }
    } else if (*at) {
      const ProtocolVariant v = parse_protocol_variant(at_variant);
      const std::size_t n = at_n ? at_n : (v == ProtocolVariant::qake ? 30000 : 20000);
      const SessionConfig cfg = make_session_config(v, n, at_loss, at_qber, at_tag, 32, at_f);
      const AttackStrategy s = parse_strategy(at_strategy);
      const TrialStats st = run_trials(s, cfg, at_trials, at_seed);
      const auto b = ToyBounds::for_tags(static_cast<double>(at_tag), static_cast<double>(at_tag), at_rob);
      Output out(at_out);
      out.stream() << trial_csv(s, st, check_bounds(s, st, b));
    } else if (*kr) {
      ExperimentModel m;
      m.variant = parse_variant(kr_variant);
      m.n_pulses = kr_n;
      m.ch = ChannelConfig::from_loss_db(kr_loss.value_or(0.0), kr_qber);
      m.ch.dark_count_prob = kr_dark;
      m.p_det = kr_p_det;
      m.f_p1 = kr_f_p1;
      m.p_x = kr_p_x;
      m.leak_mode = parse_leak_mode(kr_leak);
      m.leak_fraction = kr_leak_fraction;
      m.f_ec = kr_f_ec;
      m.tag_av_bits = m.tag_bv_bits = kr_tag;
      m.eps_sec = kr_eps_sec;
      m.eps_rob = kr_eps_rob;
      m.l_theta = kr_l_theta;
      m.method = kr_method == "kato" ? ConcentrationMethod::kato : ConcentrationMethod::hoeffding;
      if (kr_p_det && (kr_loss || !kr_range.empty())) throw ConfigError("--p-det replaces the loss; give one or the other");
      if (kr_loss && !kr_range.empty()) throw ConfigError("give --loss-db or --loss-db-range, not both");
      std::vector<KeyRateResult> rows;
      if (!kr_range.empty()) {
        const LossRange r = parse_loss_range(kr_range);
        rows = sweep(m, r.from, r.to, r.step);
      } else {
        auto r = optimize(m);
        r.loss_db = m.p_det ? -10.0 * std::log10(r.eta) : kr_loss.value_or(0.0);
        rows.push_back(r);
      }
      Output out(kr_out);
      out.stream() << keyrate_csv_header() << '\n';
      for (const auto& r : rows) out.stream() << keyrate_csv_row(r) << '\n';
      if (!kr_report.empty()) {
        Output rep(kr_report);
        rep.stream() << to_kv(report_fields(rows.back().report)) << to_kv(threshold_fields(rows.back().thresholds));
      }
    } else if (*ec) {
      std::vector<EcBenchRow> rows(ec_trials);
      parallel_for(rows.size(), [&](std::size_t t) { rows[t] = ec_bench_trial(t, ec_ber, ec_seed); });
      Output out(ec_out);
      auto& os = out.stream();
      os << "trial,rounds_used,leakage_bits,accepted,fell_back\n";
      for (const auto& r : rows)
        os << r.trial << ',' << r.rounds_used << ',' << r.leakage_bits << ',' << (r.accepted ? 1 : 0) << ','
           << (r.fell_back ? 1 : 0) << '\n';
    } else if (*ht) {
      Output out(ht_out);
      if (!ht_gen.empty()) {
        const auto c = ht_gen.find(':');
        std::size_t o = 0, m = 0;
        try {
          o = std::stoul(ht_gen.substr(0, c));
          m = c == std::string::npos ? 0 : std::stoul(ht_gen.substr(c + 1));
        } catch (const std::exception&) {
          throw ConfigError("--gen expects out:msg");
        }
        Rng rng(ht_seed);
        Bytes b;
        serialize_into(b, ToeplitzSeed::random(o, m, rng));
        out.stream() << to_hex(b) << '\n';
      } else {
        if (ht_seed_hex.empty() || ht_msg_hex.empty()) throw ConfigError("hash-test needs --seed-hex and --msg-hex, or --gen");
        const Bytes sb = from_hex(ht_seed_hex), mb = from_hex(ht_msg_hex);
        std::size_t off = 0;
        const ToeplitzSeed seed = deserialize_seed(sb, off);
        if (off != sb.size()) throw FormatError("trailing bytes after seed");
        off = 0;
        const BitString msg = deserialize_bits(mb, off);
        if (off != mb.size()) throw FormatError("trailing bytes after message");
        BitString tag = toeplitz_hash(seed, msg);
        if (!ht_mask_hex.empty()) {
          const Bytes kb = from_hex(ht_mask_hex);
          off = 0;
          const BitString mask = deserialize_bits(kb, off);
          if (off != kb.size()) throw FormatError("trailing bytes after mask");
          tag = masked_tag(seed, MaskKey{mask}, msg).value;
        }
        out.stream() << to_hex(serialize(tag)) << '\n';
      }
    }
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
