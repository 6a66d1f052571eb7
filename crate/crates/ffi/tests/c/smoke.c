#include <stdio.h>
#include <string.h>
#include "hpsem.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        HpsemStatus s_ = (call);                                           \
        if (s_ != HPSEM_STATUS_OK) {                                       \
            fprintf(stderr, "%s: %d %s\n", #call, s_, hpsem_last_error()); \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(void) {
    HpsemProblem *p = NULL;
    HpsemSolution *s = NULL;
    double f, err, v;
    size_t n = 0;

    if (hpsem_problem_from_case("nope", &p) != HPSEM_STATUS_SPEC || strlen(hpsem_last_error()) == 0)
        return 2;
    CHECK(hpsem_problem_from_case("square_smooth", &p));
    CHECK(hpsem_problem_set_discretization(p, 3, 4));
    CHECK(hpsem_solve(p, &s));
    CHECK(hpsem_solution_functional(s, &f));
    CHECK(hpsem_solution_h1_error(s, &err));
    CHECK(hpsem_solution_eval(s, 0.5, 0.5, &v));
    if (hpsem_solution_coefficients(s, NULL, 0, &n) != HPSEM_STATUS_BUFFER_TOO_SMALL || n != hpsem_solution_unknowns(s))
        return 3;
    printf("%zu %.6e %.6e %.6f\n", n, f, err, v);
    hpsem_solution_free(s);
    hpsem_problem_free(p);
    return 0;
}
