#include <doctest.h>

#include "pnc/config.hpp"
#include "pnc/errors.hpp"
#include "support.hpp"

using namespace pnc;
using nlohmann::json;

TEST_CASE("defaults match the documented protocol") {
  const RunConfig c;
  CHECK(c.data_fraction == 0.3);
  CHECK(c.mask_count == 100);
  CHECK(c.grid_rows == 4);
  CHECK(c.grid_cols == 4);
  CHECK(c.epochs_per_step == 10);
  CHECK(c.ridge_lambda == 1e-3);
  CHECK(c.locality_sigma == 0.5);
  CHECK(c.target_classes == std::vector<int>{0, 1, 2, 3, 4});
  CHECK(c.cloned_classes == std::vector<int>{5});
  CHECK_NOTHROW(validate_config(c));
}

TEST_CASE("JSON round trip preserves every field") {
  RunConfig c;
  c.seed = 99;
  c.cloned_classes = {5, 6, 7};
  c.budgets = {3, 8, 42};
  c.teacher_mode = "shift";
  const RunConfig back = merge_config(RunConfig{}, to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(config_digest(back) == config_digest(c));
  CHECK(config_digest(RunConfig{}) != config_digest(c));
}

TEST_CASE("merge overlays only the given keys") {
  const RunConfig c = merge_config(RunConfig{}, json{{"seed", 3}, {"budget_rate", 0.75}});
  CHECK(c.seed == 3);
  CHECK(c.budget_rate == 0.75);
  CHECK(c.mask_count == 100);
}

TEST_CASE("schema violations raise ConfigError") {
  CHECK_THROWS_AS(merge_config(RunConfig{}, json{{"sed", 3}}), ConfigError);
  CHECK_THROWS_AS(merge_config(RunConfig{}, json{{"seed", "three"}}), ConfigError);
  CHECK_THROWS_AS(merge_config(RunConfig{}, json::array()), ConfigError);
  auto invalid = [](auto edit) {
    RunConfig c;
    edit(c);
    CHECK_THROWS_AS(validate_config(c), ConfigError);
  };
  invalid([](RunConfig& c) { c.data_fraction = 0.0; });
  invalid([](RunConfig& c) { c.budget_rate = 1.5; });
  invalid([](RunConfig& c) { c.grid_rows = 0; });
  invalid([](RunConfig& c) { c.mask_count = 17; });
  invalid([](RunConfig& c) { c.momentum = 1.0; });
  invalid([](RunConfig& c) { c.locality_sigma = 0.0; });
  invalid([](RunConfig& c) { c.cloned_classes = {}; });
  invalid([](RunConfig& c) { c.target_classes = {0, 0}; });
  invalid([](RunConfig& c) { c.source_classes = {10}; });
  invalid([](RunConfig& c) { c.teacher_coverage = -0.1; });
  invalid([](RunConfig& c) { c.teacher_mode = "both"; });
  invalid([](RunConfig& c) { c.select_by = "accuracy"; });
  invalid([](RunConfig& c) { c.new_row_init = "zeros"; });
}

TEST_CASE("config files load over a base") {
  const auto dir = testing::scratch("config");
  write_file(dir / "c.json", R"({"seed": 11, "cloned_classes": [6]})");
  RunConfig base;
  base.mask_count = 50;
  const RunConfig c = load_config(dir / "c.json", base);
  CHECK(c.seed == 11);
  CHECK(c.cloned_classes == std::vector<int>{6});
  CHECK(c.mask_count == 50);
  write_file(dir / "bad.json", "{ not json");
  CHECK_THROWS_AS(load_config(dir / "bad.json"), ConfigError);
}

TEST_CASE("class list syntax") {
  CHECK(parse_class_list("0-4") == std::vector<int>{0, 1, 2, 3, 4});
  CHECK(parse_class_list("5,6,7") == std::vector<int>{5, 6, 7});
  CHECK(parse_class_list("5") == std::vector<int>{5});
  CHECK(parse_class_list("0-2,7") == std::vector<int>{0, 1, 2, 7});
  CHECK(class_list_str({0, 1, 2, 7}) == "0,1,2,7");
  CHECK(parse_class_list(class_list_str({9, 3, 4})) == std::vector<int>{9, 3, 4});
  for (const char* bad : {"", "a", "3-1", "1,,2", "-1", "1-"}) CHECK_THROWS_AS(parse_class_list(bad), ConfigError);
}
