#ifndef QUORUM_SQL_H
#define QUORUM_SQL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum QsStatus {
  QsOk = 0,
  /**
   * A required pointer argument was null.
   */
  QsErrNullArg = 1,
  /**
   * An input string was not valid UTF-8.
   */
  QsErrUtf8 = 2,
  /**
   * The database id is not registered or the file is unusable.
   */
  QsErrUnknownDb = 3,
  /**
   * The query failed to execute; the engine message is written to the
   * error output parameter where one is provided.
   */
  QsErrExec = 4,
  /**
   * No SQL could be extracted from the text.
   */
  QsErrNoSql = 5,
  /**
   * A row/column index was out of range.
   */
  QsErrBadIndex = 6,
  /**
   * A sample was empty.
   */
  QsErrEmptySample = 7,
  /**
   * Internal panic; the operation had no effect.
   */
  QsErrInternal = 8,
} QsStatus;

/**
 * Opaque database catalog handle.
 */
typedef struct QsCatalog QsCatalog;

/**
 * Opaque result table handle.
 */
typedef struct QsResultTable QsResultTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Release a string returned by this library. Null is a no-op.
 */
void qs_string_free(char *s);

/**
 * Normalize a SQL string (lowercase outside literals, collapsed
 * whitespace, trailing semicolon and line comments stripped).
 *
 * # Safety
 * `sql` must be a valid NUL-terminated string; `out` a valid pointer.
 */
enum QsStatus qs_normalize_sql(const char *sql, char **out);

/**
 * Extract the final SQL query from assistant text (last ```sql fence, else
 * a trailing SELECT/WITH statement).
 *
 * # Safety
 * `text` must be a valid NUL-terminated string; `out` a valid pointer.
 */
enum QsStatus qs_extract_final_sql(const char *text, char **out);

/**
 * Create an empty catalog. Free with `qs_catalog_free`.
 */
struct QsCatalog *qs_catalog_new(void);

/**
 * # Safety
 * `catalog` must come from `qs_catalog_new` and not be freed twice.
 */
void qs_catalog_free(struct QsCatalog *catalog);

/**
 * Register a database file under an id; the file must open read-only.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum QsStatus qs_catalog_add(struct QsCatalog *catalog, const char *db_id, const char *path);

/**
 * Execute SQL read-only against a registered database. On success writes a
 * table handle (free with `qs_table_free`); on execution failure writes
 * the engine's error message to `error_out` (free with `qs_string_free`)
 * and returns `QS_ERR_EXEC`. `timeout_ms = 0` means no timeout;
 * `row_cap = 0` means unlimited rows.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum QsStatus qs_execute(const struct QsCatalog *catalog,
                         const char *db_id,
                         const char *sql,
                         uint64_t timeout_ms,
                         uintptr_t row_cap,
                         struct QsResultTable **table_out,
                         char **error_out);

/**
 * # Safety
 * `table` must come from `qs_execute` and not be freed twice.
 */
void qs_table_free(struct QsResultTable *table);

/**
 * Number of rows; 0 for a null handle.
 *
 * # Safety
 * `table` must be null or a valid table handle.
 */
uintptr_t qs_table_num_rows(const struct QsResultTable *table);

/**
 * Number of columns; 0 for a null handle.
 *
 * # Safety
 * `table` must be null or a valid table handle.
 */
uintptr_t qs_table_num_columns(const struct QsResultTable *table);

/**
 * 1 when rows were dropped by the row cap, else 0.
 *
 * # Safety
 * `table` must be null or a valid table handle.
 */
int qs_table_truncated(const struct QsResultTable *table);

/**
 * Column name by index.
 *
 * # Safety
 * Pointers must be valid.
 */
enum QsStatus qs_table_column_name(const struct QsResultTable *table, uintptr_t column, char **out);

/**
 * Cell rendered as text (NULL cells render as `NULL`, blobs as `x'…'`).
 *
 * # Safety
 * Pointers must be valid.
 */
enum QsStatus qs_table_cell_text(const struct QsResultTable *table,
                                 uintptr_t row,
                                 uintptr_t column,
                                 char **out);

/**
 * Render a table as the aligned text grid used in prompts.
 *
 * # Safety
 * Pointers must be valid.
 */
enum QsStatus qs_table_render(const struct QsResultTable *table,
                              uintptr_t max_rows,
                              uintptr_t max_cell_chars,
                              char **out);

/**
 * Two-sided Mann-Whitney U test (exact for small samples, normal
 * approximation otherwise). Writes U and p.
 *
 * # Safety
 * `a`/`b` must point to `na`/`nb` doubles; `u_out`/`p_out` must be valid.
 */
enum QsStatus qs_mann_whitney_u(const double *a,
                                uintptr_t na,
                                const double *b,
                                uintptr_t nb,
                                double *u_out,
                                double *p_out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* QUORUM_SQL_H */
