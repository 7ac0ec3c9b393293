#include <math.h>
#include <stdio.h>
#include <string.h>

#include "ncc.h"

int main(int argc, char **argv) {
    double m[9];
    if (ncc_simplex_etf(3, m, 9) != NCC_STATUS_OK) return 1;
    if (fabs(m[0] - sqrt(1.5) * 2.0 / 3.0) > 1e-12) return 2;

    if (ncc_simplex_etf(1, m, 9) != NCC_STATUS_DOMAIN) return 3;
    if (ncc_last_error_message() == NULL) return 4;

    double id[20], ood[4] = {0, 1, 2, 3};
    for (int i = 0; i < 20; i++) id[i] = i + 1;
    NccFprResult r;
    if (ncc_fpr_at_tpr(id, 20, ood, 4, 0.95, &r) != NCC_STATUS_OK) return 5;
    if (r.threshold != 2.0 || r.fpr != 0.5) return 6;

    if (argc > 1) {
        NccModel *model = NULL;
        if (ncc_model_load(argv[1], &model) != NCC_STATUS_OK) return 7;
        size_t d = ncc_model_input_dim(model), k = ncc_model_num_classes(model);
        double x[64] = {0};
        double logits[64];
        if (d > 64 || k > 64) return 8;
        if (ncc_model_forward(model, x, 1, logits, k) != NCC_STATUS_OK) return 9;
        ncc_model_free(model);
    }
    printf("ok %s\n", ncc_version());
    return 0;
}
