#include <stdio.h>
#include "lbap.h"

int main(void) {
    const double prior[3] = {0.5, 0.3, 0.2};
    const double scene[3] = {1.0, 1e-3, 1.0};
    const double world[3] = {0.9, 0.9, 0.1};
    double post[3];
    uint8_t mask[3];
    size_t size = 0;

    if (lbap_posterior(prior, scene, world, 3, LBAP_MODE_FULL, post) != LBAP_STATUS_OK ||
        lbap_prediction_set(post, 3, 0.03, mask, &size) != LBAP_STATUS_OK) {
        fprintf(stderr, "lbap: %s\n", lbap_last_error_message());
        return 1;
    }
    for (int i = 0; i < 3; i++) {
        printf("%c %.6f %s\n", 'A' + i, post[i], mask[i] ? "in set" : "");
    }
    printf("%s\n", size == 1 ? "execute" : "ask for help");
    return 0;
}
