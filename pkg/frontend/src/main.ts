import { ApiClient } from "./api.js";
import { App } from "./app.js";

const root = document.getElementById("app");
if (!root) {
  throw new Error("missing #app mount point");
}
const reviewer =
  new URLSearchParams(window.location.search).get("reviewer") ?? window.localStorage.getItem("reviewer") ?? "expert";
window.localStorage.setItem("reviewer", reviewer);

const app = new App(root, new ApiClient(""), reviewer);
void app.start();
