#ifndef COPHY_H
#define COPHY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>
#include <stddef.h>
#include <stdint.h>

// Number of doubles in a flattened trajectory: `x0, y0, x1, y1, ...`.
#define COPHY_TRAJECTORY_LEN 16

// Result code of every exported function.
typedef enum CophyStatus {
  COPHY_STATUS_OK = 0,
  COPHY_STATUS_NULL_POINTER = 1,
  COPHY_STATUS_INVALID_UTF8 = 2,
  COPHY_STATUS_INVALID_ARGUMENT = 3,
  COPHY_STATUS_IO = 4,
  COPHY_STATUS_PARSE = 5,
  COPHY_STATUS_UNKNOWN_COMMAND = 6,
  COPHY_STATUS_PLANNING = 7,
  COPHY_STATUS_PANIC = 8,
} CophyStatus;

// A loaded planner checkpoint.
typedef struct CophyModel CophyModel;

// A generated or parsed scenario.
typedef struct CophyScenario CophyScenario;

// An interactive planning session bound to one model and one scenario.
typedef struct CophySession CophySession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cophy_version(void);

// Message of the last failed call on this thread, or an empty string. The
// pointer stays valid until the next call into the library on this thread.
const char *cophy_last_error(void);

// Releases a string returned by the library. Null is ignored.
//
// # Safety
// `s` must come from this library and must not be used afterwards.
void cophy_string_free(char *s);

// Loads a checkpoint written by `cophy train-il` or `cophy train-rl`.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CophyStatus cophy_model_load(const char *path, struct CophyModel **out_model);

// Number of candidate trajectories the model proposes per plan.
//
// # Safety
// `model` must be a live handle; `out_count` must be writable.
enum CophyStatus cophy_model_candidate_count(const struct CophyModel *model, uintptr_t *out_count);

// # Safety
// `model` must come from [`cophy_model_load`] and must not be used afterwards.
// Sessions created from it keep their own reference and stay valid.
void cophy_model_free(struct CophyModel *model);

// Generates the deterministic scenario for `(template, seed)`.
//
// # Safety
// `template` must be a NUL-terminated string; `out_scenario` must be writable.
enum CophyStatus cophy_scenario_generate(const char *template_,
                                         uint64_t seed,
                                         struct CophyScenario **out_scenario);

// Parses one scenario record (a single line of a `cophy gen` dataset).
//
// # Safety
// `json` must be a NUL-terminated string; `out_scenario` must be writable.
enum CophyStatus cophy_scenario_from_json(const char *json, struct CophyScenario **out_scenario);

// Serializes a scenario to JSON. Free the result with [`cophy_string_free`].
//
// # Safety
// `scenario` must be a live handle; `out_json` must be writable.
enum CophyStatus cophy_scenario_to_json(const struct CophyScenario *scenario, char **out_json);

// Copies the expert trajectory into `out_xy` (at least
// [`COPHY_TRAJECTORY_LEN`] doubles).
//
// # Safety
// `scenario` must be a live handle; `out_xy` must hold `len` doubles.
enum CophyStatus cophy_scenario_expert(const struct CophyScenario *scenario,
                                       double *out_xy,
                                       uintptr_t len);

// # Safety
// `scenario` must come from this library and must not be used afterwards.
void cophy_scenario_free(struct CophyScenario *scenario);

// Scores a planning-frame trajectory against the scenario's ground truth.
//
// # Safety
// `scenario` must be a live handle; `xy` must hold `len` doubles; the
// outputs must be writable.
enum CophyStatus cophy_score_trajectory(const struct CophyScenario *scenario,
                                        const double *xy,
                                        uintptr_t len,
                                        double *out_pdms,
                                        double *out_epdms);

// Plans once from the scenario's initial state. `command` selects the
// cognitive vector; null uses the distilled one. Writes the selected
// trajectory and its candidate index.
//
// # Safety
// Handles must be live; `command` is null or NUL-terminated; `out_xy` holds
// `len` doubles; `out_index` is null or writable.
enum CophyStatus cophy_plan(const struct CophyModel *model,
                            const struct CophyScenario *scenario,
                            const char *command,
                            double psi,
                            double *out_xy,
                            uintptr_t len,
                            uintptr_t *out_index);

// Starts an interactive session. The scenario is copied. When `out_frame`
// is non-null it receives the first frame as `cophy-wire/1` JSON.
//
// # Safety
// Handles must be live; `out_session` must be writable; `out_frame` is null
// or writable.
enum CophyStatus cophy_session_start(const struct CophyModel *model,
                                     const struct CophyScenario *scenario,
                                     double psi,
                                     struct CophySession **out_session,
                                     char **out_frame);

// Switches the session to an exact vocabulary command and re-plans. An
// unknown command returns [`CophyStatus::UnknownCommand`] and leaves the
// session unchanged.
//
// # Safety
// `session` must be live; `text` NUL-terminated; `out_frame` null or writable.
enum CophyStatus cophy_session_command(struct CophySession *session,
                                       const char *text,
                                       char **out_frame);

// Returns the session to the distilled cognitive vector.
//
// # Safety
// `session` must be live; `out_frame` null or writable.
enum CophyStatus cophy_session_clear(struct CophySession *session, char **out_frame);

// Advances `ticks` ticks. `out_frames` receives a JSON array with one frame
// per tick (the last one terminal once the horizon is reached).
//
// # Safety
// `session` must be live; `out_frames` null or writable.
enum CophyStatus cophy_session_step(struct CophySession *session,
                                    uintptr_t ticks,
                                    char **out_frames);

// Current tick of the session and whether the horizon has been reached.
//
// # Safety
// `session` must be live; outputs null or writable.
enum CophyStatus cophy_session_tick(const struct CophySession *session,
                                    uintptr_t *out_tick,
                                    bool *out_terminal);

// # Safety
// `session` must come from [`cophy_session_start`] and must not be used afterwards.
void cophy_session_free(struct CophySession *session);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* COPHY_H */
