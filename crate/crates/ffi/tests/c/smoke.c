/* SPDX-License-Identifier: Apache-2.0 */
#include <math.h>
#include <stdio.h>
#include <string.h>

#include "ncvae.h"

int main(void) {
    double a[4] = {0.0, -1.0, 1.0, 0.0};
    double e[4];
    if (ncvae_mat_exp(2, a, e) != NCVAE_STATUS_OK) return 1;
    if (fabs(e[0] - cos(1.0)) > 1e-12 || fabs(e[2] - sin(1.0)) > 1e-12) return 2;

    NcvaeDataset *ds = NULL;
    if (ncvae_dataset_generate(4, 12, 7, &ds) != NCVAE_STATUS_OK) return 3;
    if (ncvae_dataset_len(ds) != 4 || ncvae_dataset_side(ds) != 12) return 4;
    char sum[65];
    if (ncvae_dataset_checksum(ds, sum, sizeof sum) != NCVAE_STATUS_OK) return 5;
    if (strlen(sum) != 64) return 6;
    char tiny[8];
    if (ncvae_dataset_checksum(ds, tiny, sizeof tiny) != NCVAE_STATUS_BUFFER_TOO_SMALL) return 7;
    if (ncvae_last_error_message() == NULL) return 8;
    ncvae_dataset_free(ds);

    if (ncvae_dataset_load(NULL, &ds) != NCVAE_STATUS_NULL_POINTER) return 9;
    printf("%s %s\n", ncvae_version(), sum);
    return 0;
}
