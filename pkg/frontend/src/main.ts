import { ApiClient } from "./api.js";
import { createApp } from "./app.js";

window.addEventListener("load", () => {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app mount point");
  const app = createApp(root, new ApiClient());
  void app.start();
});
