#include <stdio.h>
#include <string.h>

#include "daonet.h"

#define EXPECT(cond) do { if (!(cond)) { fprintf(stderr, "line %d: %s\n", __LINE__, #cond); return 1; } } while (0)

int main(void) {
    DaonetWeights *w = NULL;
    EXPECT(daonet_weights_init("dsconv", 8, 3, &w) == DAONET_STATUS_OK);
    EXPECT(daonet_weights_param_count(w) > 0);

    size_t dims[4] = {1, 8, 5, 5};
    float data[200];
    for (int i = 0; i < 200; i++) data[i] = (float)(i % 7) * 0.25f - 0.75f;
    DaonetTensor *x = NULL, *y = NULL;
    EXPECT(daonet_tensor_new(dims, 4, data, 200, &x) == DAONET_STATUS_OK);
    EXPECT(daonet_module_forward("dsconv", w, x, &y) == DAONET_STATUS_OK);

    size_t out[4] = {0};
    EXPECT(daonet_tensor_rank(y) == 4);
    EXPECT(daonet_tensor_dims(y, out, 4) == DAONET_STATUS_OK);
    EXPECT(memcmp(out, dims, sizeof dims) == 0);
    EXPECT(daonet_tensor_dims(y, out, 2) == DAONET_STATUS_BUFFER_TOO_SMALL);
    EXPECT(daonet_tensor_len(y) == 200 && daonet_tensor_data(y) != NULL);

    DaonetTensor *bad = NULL;
    EXPECT(daonet_module_forward("yolo", w, x, &bad) == DAONET_STATUS_CONFIG);
    EXPECT(bad == NULL && strstr(daonet_last_error(), "yolo") != NULL);
    EXPECT(daonet_module_forward("dsconv", NULL, x, &bad) == DAONET_STATUS_NULL_ARGUMENT);

    uint64_t params = 0, flops = 0;
    EXPECT(daonet_cost("baseline", 640, &params, &flops) == DAONET_STATUS_OK);
    EXPECT(params > 2700000 && params < 3300000);
    EXPECT(daonet_cost("baseline", 641, &params, &flops) == DAONET_STATUS_CONFIG);

    printf("%016llx\n", (unsigned long long)daonet_tensor_checksum(y));
    daonet_tensor_free(y);
    daonet_tensor_free(x);
    daonet_weights_free(w);
    return 0;
}
