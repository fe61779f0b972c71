#ifndef LBAP_H
#define LBAP_H

#include <stddef.h>
#include <stdint.h>

// Largest option count accepted per scenario.
#define LBAP_MAX_OPTIONS 26

typedef enum LbapStatus {
  LBAP_STATUS_OK = 0,
  LBAP_STATUS_NULL_POINTER = 1,
  LBAP_STATUS_INVALID_ARGUMENT = 2,
  LBAP_STATUS_LENGTH_MISMATCH = 3,
  LBAP_STATUS_DEGENERATE_MASS = 4,
  LBAP_STATUS_INSUFFICIENT_DATA = 5,
  LBAP_STATUS_INVALID_UTF8 = 6,
  LBAP_STATUS_PANIC = 99,
} LbapStatus;

typedef enum LbapMode {
  LBAP_MODE_FULL = 0,
  LBAP_MODE_SCENE_ONLY = 1,
  LBAP_MODE_WORLD_ONLY = 2,
  LBAP_MODE_PRIOR_ONLY = 3,
  LBAP_MODE_NO_HELP = 4,
} LbapMode;

// Object vocabulary used to parse action text.
typedef struct LbapLexicon LbapLexicon;

// Scored calibration scenarios: per-option prior, likelihoods and truth.
typedef struct LbapScenarioSet LbapScenarioSet;

// Axis-aligned box in normalized image coordinates.
typedef struct LbapBBox {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
} LbapBBox;

typedef struct LbapCalibration {
  double threshold;
  double qhat;
  // Share of calibration scenarios whose set holds a true option.
  double coverage;
  size_t n;
  // Non-zero when the threshold was clipped to its upper bound.
  uint8_t degenerate;
} LbapCalibration;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static nul-terminated string.
const char *lbap_version(void);

// Message for the last failed call on this thread, or null. The pointer
// stays valid until the next `lbap_*` call on the same thread.
const char *lbap_last_error_message(void);

// Normalized posterior over `n` options, written to `out[0..n]`.
//
// # Safety
// `prior`, `scene_lik`, `world_lik` and `out` must each hold `n` doubles.
enum LbapStatus lbap_posterior(const double *prior,
                               const double *scene_lik,
                               const double *world_lik,
                               size_t n,
                               enum LbapMode mode,
                               double *out);

// Marks set members in `out_mask` (1 = member) and stores the set size.
// Options strictly above `threshold` are members; an empty set falls back
// to the argmax.
//
// # Safety
// `posterior` and `out_mask` must hold `n` elements; `out_size` must be
// writable.
enum LbapStatus lbap_prediction_set(const double *posterior,
                                    size_t n,
                                    double threshold,
                                    uint8_t *out_mask,
                                    size_t *out_size);

// Intersection over union of two boxes with coordinates in [0,1].
//
// # Safety
// `a` and `b` must point to valid boxes; `out` must be writable.
enum LbapStatus lbap_iou(const struct LbapBBox *a, const struct LbapBBox *b, double *out);

// Tabletop lexicon over `palette` (the default colors when `n` is 0).
//
// # Safety
// `palette` must hold `n` nul-terminated strings; `out` must be writable.
enum LbapStatus lbap_lexicon_tabletop(const char *const *palette,
                                      size_t n,
                                      struct LbapLexicon **out);

// Lexicon for the mobile-manipulation kitchen.
//
// # Safety
// `out` must be writable.
enum LbapStatus lbap_lexicon_mobile(struct LbapLexicon **out);

// # Safety
// `lexicon` must be null or a handle from an `lbap_lexicon_*` constructor
// not yet freed.
void lbap_lexicon_free(struct LbapLexicon *lexicon);

// Textual grounding likelihood of `action` against the scene object names:
// 1 when every mentioned object is present, `epsilon` otherwise.
//
// # Safety
// `lexicon` must be a live handle, `action` a nul-terminated string,
// `scene_objects` `n_objects` nul-terminated strings and `out` writable.
enum LbapStatus lbap_ground_textual(const struct LbapLexicon *lexicon,
                                    const char *action,
                                    const char *const *scene_objects,
                                    size_t n_objects,
                                    double epsilon,
                                    double *out);

// Empty calibration set.
//
// # Safety
// `out` must be writable.
enum LbapStatus lbap_scenario_set_new(struct LbapScenarioSet **out);

// Appends one scored scenario; `truth[i]` is non-zero when option `i`
// matches a true action.
//
// # Safety
// `set` must be a live handle; the four arrays must each hold `n` values.
enum LbapStatus lbap_scenario_set_push(struct LbapScenarioSet *set,
                                       const double *prior,
                                       const double *scene_lik,
                                       const double *world_lik,
                                       const uint8_t *truth,
                                       size_t n);

// Number of scenarios in the set; 0 for a null handle.
//
// # Safety
// `set` must be null or a live handle.
size_t lbap_scenario_set_len(const struct LbapScenarioSet *set);

// # Safety
// `set` must be null or a handle from [`lbap_scenario_set_new`] not yet
// freed.
void lbap_scenario_set_free(struct LbapScenarioSet *set);

// Conformal threshold at miscoverage `alpha` for `mode`.
//
// # Safety
// `set` must be a live handle and `out` writable.
enum LbapStatus lbap_calibrate(const struct LbapScenarioSet *set,
                               enum LbapMode mode,
                               double alpha,
                               struct LbapCalibration *out);

// Area under the success-vs-help curve of `n` sweep points.
//
// # Safety
// `help_rates` and `success_rates` must hold `n` doubles; `out` writable.
enum LbapStatus lbap_auc(const double *help_rates,
                         const double *success_rates,
                         size_t n,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LBAP_H */
