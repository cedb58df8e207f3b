#include "latdyn/latdyn.h"

#include <cstring>
#include <string>

#include "core/errors.hpp"
#include "core/experiment.hpp"

using latdyn::ConfigError;
using latdyn::DataError;
using latdyn::ExperimentConfig;
using latdyn::NumericError;

struct ld_config {
  ExperimentConfig cfg;
};

namespace {

thread_local std::string t_last_error;

int guard(const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    t_last_error = e.what();
    return LD_ERR_NUMERIC;
  } catch (const ConfigError& e) {
    t_last_error = e.what();
    return LD_ERR_CONFIG;
  } catch (const DataError& e) {
    t_last_error = e.what();
    return LD_ERR_DATA;
  } catch (const std::exception& e) {
    t_last_error = e.what();
    return LD_ERR_DATA;
  }
}

int write_out(const std::string& text, char* buf, size_t cap, size_t* needed) {
  if (needed) *needed = text.size();
  if (buf && cap > 0) {
    const size_t n = std::min(cap - 1, text.size());
    std::memcpy(buf, text.data(), n);
    buf[n] = '\0';
  }
  return LD_OK;
}

}  // namespace

extern "C" {

const char* ld_version(void) { return latdyn::kCodeVersion; }

const char* ld_last_error(void) { return t_last_error.c_str(); }

int ld_config_create(const char* preset, ld_config** out) {
  if (out == nullptr) {
    t_last_error = "ld_config_create: out must not be NULL";
    return LD_ERR_CONFIG;
  }
  *out = nullptr;
  return guard([&]() {
    auto* cfg = new ld_config{ExperimentConfig::with_preset(preset ? preset : "desk")};
    *out = cfg;
    return LD_OK;
  });
}

void ld_config_destroy(ld_config* cfg) { delete cfg; }

int ld_config_load_file(ld_config* cfg, const char* path) {
  if (!cfg || !path) {
    t_last_error = "ld_config_load_file: NULL argument";
    return LD_ERR_CONFIG;
  }
  return guard([&]() {
    cfg->cfg.load_file(path);
    return LD_OK;
  });
}

int ld_config_set(ld_config* cfg, const char* key, const char* value) {
  if (!cfg || !key || !value) {
    t_last_error = "ld_config_set: NULL argument";
    return LD_ERR_CONFIG;
  }
  return guard([&]() {
    cfg->cfg.set(key, value);
    return LD_OK;
  });
}

int ld_config_print(const ld_config* cfg, char* buf, size_t cap, size_t* needed) {
  if (!cfg) {
    t_last_error = "ld_config_print: NULL config";
    return LD_ERR_CONFIG;
  }
  return guard([&]() { return write_out(cfg->cfg.to_json(true), buf, cap, needed); });
}

int ld_run_generate(ld_config* cfg) {
  if (!cfg) {
    t_last_error = "ld_run_generate: NULL config";
    return LD_ERR_CONFIG;
  }
  return guard([&]() {
    latdyn::run_generate(cfg->cfg);
    return LD_OK;
  });
}

int ld_run_train(ld_config* cfg) {
  if (!cfg) {
    t_last_error = "ld_run_train: NULL config";
    return LD_ERR_CONFIG;
  }
  return guard([&]() {
    latdyn::run_train(cfg->cfg);
    return LD_OK;
  });
}

int ld_run_evaluate(ld_config* cfg) {
  if (!cfg) {
    t_last_error = "ld_run_evaluate: NULL config";
    return LD_ERR_CONFIG;
  }
  return guard([&]() {
    latdyn::run_evaluate(cfg->cfg);
    return LD_OK;
  });
}

int ld_run_export_field(ld_config* cfg, const char* out_path) {
  if (!cfg || !out_path) {
    t_last_error = "ld_run_export_field: NULL argument";
    return LD_ERR_CONFIG;
  }
  return guard([&]() {
    latdyn::run_export_field(cfg->cfg, out_path);
    return LD_OK;
  });
}

int ld_run_reproduce(ld_config* cfg, const char* table_id, char* buf, size_t cap,
                     size_t* needed) {
  if (!cfg || !table_id) {
    t_last_error = "ld_run_reproduce: NULL argument";
    return LD_ERR_CONFIG;
  }
  return guard([&]() {
    latdyn::ResultsTable table = latdyn::run_reproduce(cfg->cfg, table_id);
    return write_out(table.render_text(), buf, cap, needed);
  });
}

}  // extern "C"
